//! The full two-stream network: a shared embedding, a stack of spatial
//! (SSA-GC then MS-TC) blocks and a parallel stack of temporal (TSA then
//! MS-SC) blocks, global average pooling, channel-wise fusion
//! `z1 + alpha ⊙ z2`, optional Gaussian noise, and a linear classifier.
//!
//! Parameter names:
//!
//! | name | shape |
//! |------|-------|
//! | `embed.w`, `embed.b` | `[C, D0]`, `[D0]` |
//! | `L{l}.s{s}.attn.h{m}.{wq,wk,wv}` | `[D_in, D_in/M]` |
//! | `L{l}.s{s}.attn.wo` | `[D_in, D_out]` |
//! | `L{l}.s1.adj.h{m}` | `[N, N]` |
//! | `L{l}.s1.spe` / `L{l}.s2.tpe` | `[N, D_in]` / `[T, D_in]` |
//! | `L{l}.s{s}.res.{w,b}` (width changes only) | `[D_in, D_out]`, `[D_out]` |
//! | `L{l}.s{s}.ln{1,2}.{gain,bias}` | `[D_out]` |
//! | `L{l}.s{s}.branch{b}.{pw,pw_b}` | `[D_out, D_out/4]`, `[D_out/4]` |
//! | `L{l}.s{s}.branch{1,2}.w` | `[5, D_out/4, D_out/4]` |
//! | `head.alpha`, `head.fc.w`, `head.fc.b` | `[C_out]`, `[C_out, K]`, `[K]` |
//!
//! Layers and heads are numbered from 1.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMaps, AttentionParams, HeadVars, MapKind};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::multiscale::{self, MultiScaleConfig, MultiScaleParams, MultiScaleVars, BRANCHES};
use crate::params::ParameterStore;
use crate::tensor::{Axis, GradCheckReport, Tape, Tensor, Var};

const PE_STD: f64 = 0.02;

fn default_layers() -> usize {
    9
}
fn default_base() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_frames() -> usize {
    64
}
fn default_noise() -> f64 {
    1.0
}

/// Architecture hyperparameters. `joints` and `in_channels` of 0 mean
/// "take them from the graph and the data".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_base")]
    pub base_channel: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub joints: usize,
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: default_layers(),
            base_channel: default_base(),
            heads: default_heads(),
            num_classes: 0,
            frames: default_frames(),
            joints: 0,
            in_channels: 0,
            noise_std: default_noise(),
        }
    }
}

impl ModelConfig {
    /// The small configuration used by gradient checks: N=3, T=8, base 8,
    /// two heads, two classes.
    pub fn toy() -> Self {
        Self {
            layers: 9,
            base_channel: 8,
            heads: 2,
            num_classes: 2,
            frames: 8,
            joints: 3,
            in_channels: 3,
            noise_std: 1.0,
        }
    }

    /// Output width of every block: the base width for the first third of
    /// the stack, doubled for the second, quadrupled for the last.
    pub fn channel_schedule(&self) -> Vec<usize> {
        (0..self.layers)
            .map(|i| self.base_channel << (i * 3 / self.layers))
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        *self.channel_schedule().last().unwrap_or(&self.base_channel)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("need at least one encoding block".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.joints == 0 || self.in_channels == 0 || self.frames == 0 {
            return fail("joints, in_channels and frames must be set".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return fail(format!("noise std {} is invalid", self.noise_std));
        }
        let mut d_in = self.base_channel;
        for (l, &c) in self.channel_schedule().iter().enumerate() {
            if c % BRANCHES != 0 {
                return fail(format!("block {} width {c} not divisible by {BRANCHES}", l + 1));
            }
            attention::head_dim(d_in, self.heads)?;
            d_in = c;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stream {
    /// SSA-GC followed by MS-TC.
    Spatial,
    /// TSA followed by MS-SC.
    Temporal,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Spatial => "s1",
            Stream::Temporal => "s2",
        }
    }
}

/// Registers store parameters on a tape on first use.
pub struct Binder<'a> {
    store: &'a ParameterStore,
    vars: Vec<Option<Var>>,
    grad: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParameterStore, grad: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            grad,
        }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let t = self.store.by_index(i).1.clone();
        let v = if self.grad { tape.param(t) } else { tape.leaf(t) };
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// `(store index, var)` of every parameter the forward pass touched.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

/// Shape of one block's output, recorded on every forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub stream: Stream,
    pub layer: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct ForwardTrace {
    pub block_shapes: Vec<BlockShape>,
    pub maps: Option<AttentionMaps>,
}

impl ForwardTrace {
    pub fn with_maps() -> Self {
        Self {
            block_shapes: Vec::new(),
            maps: Some(AttentionMaps::default()),
        }
    }
}

/// Per-position linear map `C -> D0` plus bias.
pub fn embed(tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
    let w = binder.var(tape, "embed.w")?;
    let b = binder.var(tape, "embed.b")?;
    let c = *tape.shape(x).last().unwrap();
    if tape.shape(w)[0] != c {
        return Err(Error::Shape(format!(
            "input has {c} channels, embedding expects {}",
            tape.shape(w)[0]
        )));
    }
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

fn layer_norm(tape: &mut Tape, binder: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let g = binder.var(tape, &format!("{prefix}.gain"))?;
    let b = binder.var(tape, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b)
}

/// Runs every encoding block of one stream on the embedded `[T, N, D0]`
/// features and global-average-pools the result to a `C_out` vector.
pub fn stream_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    h0: Var,
    stream: Stream,
    config: &ModelConfig,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let mut h = h0;
    let mut d_in = config.base_channel;
    let s = stream.tag();
    for (idx, &d_out) in config.channel_schedule().iter().enumerate() {
        let l = idx + 1;
        let p = format!("L{l}.{s}");
        let heads: Vec<HeadVars> = (1..=config.heads)
            .map(|m| {
                Ok(HeadVars {
                    wq: binder.var(tape, &format!("{p}.attn.h{m}.wq"))?,
                    wk: binder.var(tape, &format!("{p}.attn.h{m}.wk"))?,
                    wv: binder.var(tape, &format!("{p}.attn.h{m}.wv"))?,
                })
            })
            .collect::<Result<_>>()?;
        let wo = binder.var(tape, &format!("{p}.attn.wo"))?;
        let (attn, maps, kind) = match stream {
            Stream::Spatial => {
                let spe = binder.var(tape, &format!("{p}.spe"))?;
                let adj: Vec<Var> = (1..=config.heads)
                    .map(|m| binder.var(tape, &format!("{p}.adj.h{m}")))
                    .collect::<Result<_>>()?;
                let (o, maps) = attention::spatial_attention(tape, h, spe, &heads, &adj, wo)?;
                (o, maps, MapKind::Spatial)
            }
            Stream::Temporal => {
                let tpe = binder.var(tape, &format!("{p}.tpe"))?;
                let (o, maps) = attention::temporal_attention(tape, h, tpe, &heads, wo)?;
                (o, maps, MapKind::Temporal)
            }
        };
        if let Some(rec) = trace.maps.as_mut() {
            for (m, v) in maps.iter().enumerate() {
                rec.record(l, m + 1, kind, tape.value(*v));
            }
        }
        let residual = if d_in != d_out {
            let w = binder.var(tape, &format!("{p}.res.w"))?;
            let b = binder.var(tape, &format!("{p}.res.b"))?;
            let r = tape.matmul(h, w)?;
            tape.add(r, b)?
        } else {
            h
        };
        let sum = tape.add(attn, residual)?;
        let mid = layer_norm(tape, binder, sum, &format!("{p}.ln1"))?;

        let ms_vars = MultiScaleVars {
            pointwise: branch_vars(tape, binder, &p, "pw")?,
            pointwise_bias: branch_vars(tape, binder, &p, "pw_b")?,
            conv: [
                binder.var(tape, &format!("{p}.branch1.w"))?,
                binder.var(tape, &format!("{p}.branch2.w"))?,
            ],
        };
        let conv = match stream {
            Stream::Spatial => multiscale::ms_tc_forward(tape, mid, &MultiScaleConfig::temporal(d_out, d_out)?, &ms_vars)?,
            Stream::Temporal => multiscale::ms_sc_forward(tape, mid, &MultiScaleConfig::spatial(d_out, d_out)?, &ms_vars)?,
        };
        let sum = tape.add(conv, mid)?;
        h = layer_norm(tape, binder, sum, &format!("{p}.ln2"))?;
        trace.block_shapes.push(BlockShape {
            stream,
            layer: l,
            shape: tape.shape(h).to_vec(),
        });
        d_in = d_out;
    }
    Ok(tape.mean_rows(h))
}

fn branch_vars(tape: &mut Tape, binder: &mut Binder, prefix: &str, suffix: &str) -> Result<[Var; BRANCHES]> {
    let vars: Vec<Var> = (1..=BRANCHES)
        .map(|b| binder.var(tape, &format!("{prefix}.branch{b}.{suffix}")))
        .collect::<Result<_>>()?;
    Ok(vars.try_into().expect("one var per branch"))
}

/// `z1 + alpha ⊙ z2`, plus `noise_std · ε` with `ε ~ N(0, I)` when training.
pub fn fuse_streams<R: Rng + ?Sized>(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    alpha: Var,
    noise_std: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if tape.shape(z1) != tape.shape(z2) || tape.shape(z1) != tape.shape(alpha) {
        return Err(Error::Shape(format!(
            "fusion of {:?} and {:?} with alpha {:?}",
            tape.shape(z1),
            tape.shape(z2),
            tape.shape(alpha)
        )));
    }
    let scaled = tape.mul(z2, alpha)?;
    let fused = tape.add(z1, scaled)?;
    if training && noise_std > 0.0 {
        let n = tape.value(fused).numel();
        let eps: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                noise_std * e
            })
            .collect();
        let shape = tape.shape(fused).to_vec();
        let noise = tape.leaf(Tensor::new(&shape, eps)?);
        return tape.add(fused, noise);
    }
    Ok(fused)
}

/// Affine classifier on a `C_out` vector; returns `[1, K]` logits.
pub fn classify(tape: &mut Tape, z: Var, w: Var, b: Var) -> Result<Var> {
    let c = tape.value(z).numel();
    let row = tape.reshape(z, &[1, c])?;
    let logits = tape.matmul(row, w)?;
    tape.add(logits, b)
}

/// Result of one forward and backward pass on a single labelled sample.
#[derive(Clone, Debug)]
pub struct SampleGradients {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct MsstModel {
    config: ModelConfig,
    params: ParameterStore,
}

impl MsstModel {
    /// Initializes every parameter. Topology matrices start from the
    /// normalized physical adjacency of `graph`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, graph: &GraphSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if graph.num_joints() != config.joints {
            return Err(Error::Config(format!(
                "config has {} joints, graph {} has {}",
                config.joints,
                graph.name(),
                graph.num_joints()
            )));
        }
        let mut ps = ParameterStore::new();
        let (c, d0) = (config.in_channels, config.base_channel);
        ps.insert("embed.w", Tensor::uniform(&[c, d0], 1.0 / (c as f64).sqrt(), rng))?;
        ps.insert("embed.b", Tensor::zeros(&[d0]))?;
        let adj = graph.normalized_adjacency();
        for stream in [Stream::Spatial, Stream::Temporal] {
            let mut d_in = d0;
            for (idx, &d_out) in config.channel_schedule().iter().enumerate() {
                let p = format!("L{}.{}", idx + 1, stream.tag());
                let attn = AttentionParams::init(d_in, d_out, config.heads, rng)?;
                for (m, h) in attn.heads.into_iter().enumerate() {
                    ps.insert(format!("{p}.attn.h{}.wq", m + 1), h.wq)?;
                    ps.insert(format!("{p}.attn.h{}.wk", m + 1), h.wk)?;
                    ps.insert(format!("{p}.attn.h{}.wv", m + 1), h.wv)?;
                }
                ps.insert(format!("{p}.attn.wo"), attn.wo)?;
                match stream {
                    Stream::Spatial => {
                        for m in 1..=config.heads {
                            ps.insert(format!("{p}.adj.h{m}"), adj.clone())?;
                        }
                        ps.insert(format!("{p}.spe"), Tensor::normal(&[config.joints, d_in], PE_STD, rng))?;
                    }
                    Stream::Temporal => {
                        ps.insert(format!("{p}.tpe"), Tensor::normal(&[config.frames, d_in], PE_STD, rng))?;
                    }
                }
                if d_in != d_out {
                    ps.insert(format!("{p}.res.w"), Tensor::uniform(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng))?;
                    ps.insert(format!("{p}.res.b"), Tensor::zeros(&[d_out]))?;
                }
                ps.insert(format!("{p}.ln1.gain"), Tensor::ones(&[d_out]))?;
                ps.insert(format!("{p}.ln1.bias"), Tensor::zeros(&[d_out]))?;
                let axis = match stream {
                    Stream::Spatial => Axis::Time,
                    Stream::Temporal => Axis::Node,
                };
                let ms = MultiScaleParams::init(&MultiScaleConfig::new(axis, d_out, d_out)?, rng);
                for (b, (pw, pwb)) in ms.pointwise.into_iter().zip(ms.pointwise_bias).enumerate() {
                    ps.insert(format!("{p}.branch{}.pw", b + 1), pw)?;
                    ps.insert(format!("{p}.branch{}.pw_b", b + 1), pwb)?;
                }
                for (b, w) in ms.conv.into_iter().enumerate() {
                    ps.insert(format!("{p}.branch{}.w", b + 1), w)?;
                }
                ps.insert(format!("{p}.ln2.gain"), Tensor::ones(&[d_out]))?;
                ps.insert(format!("{p}.ln2.bias"), Tensor::zeros(&[d_out]))?;
                d_in = d_out;
            }
        }
        let c_out = config.out_channels();
        ps.insert("head.alpha", Tensor::zeros(&[c_out]))?;
        ps.insert(
            "head.fc.w",
            Tensor::uniform(&[c_out, config.num_classes], 1.0 / (c_out as f64).sqrt(), rng),
        )?;
        ps.insert("head.fc.b", Tensor::zeros(&[config.num_classes]))?;
        Ok(Self { config, params: ps })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Records the forward pass for one `[T, N, C]` sample and returns the
    /// `[1, K]` logits.
    pub fn record<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: &Tensor,
        training: bool,
        rng: &mut R,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let c = &self.config;
        let expected = [c.frames, c.joints, c.in_channels];
        if x.shape() != expected {
            return Err(Error::Shape(format!(
                "sample shape {:?}, model expects {expected:?}",
                x.shape()
            )));
        }
        let xv = tape.leaf(x.clone());
        let h0 = embed(tape, binder, xv)?;
        let z1 = stream_forward(tape, binder, h0, Stream::Spatial, c, trace)?;
        let z2 = stream_forward(tape, binder, h0, Stream::Temporal, c, trace)?;
        let alpha = binder.var(tape, "head.alpha")?;
        let fused = fuse_streams(tape, z1, z2, alpha, c.noise_std, training, rng)?;
        let w = binder.var(tape, "head.fc.w")?;
        let b = binder.var(tape, "head.fc.b")?;
        classify(tape, fused, w, b)
    }

    /// Inference logits for one sample (noise off).
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let mut trace = ForwardTrace::default();
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.record(&mut tape, &mut binder, x, false, &mut unused, &mut trace)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Logits for one sample plus the recorded block shapes and, when
    /// `trace_maps` is set, the attention maps.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        training: bool,
        rng: &mut R,
        trace_maps: bool,
    ) -> Result<(Vec<f64>, ForwardTrace)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let mut trace = if trace_maps {
            ForwardTrace::with_maps()
        } else {
            ForwardTrace::default()
        };
        let out = self.record(&mut tape, &mut binder, x, training, rng, &mut trace)?;
        Ok((tape.value(out).data().to_vec(), trace))
    }

    /// Cross-entropy of one sample and its gradient with respect to every
    /// parameter, as `(store index, gradient)` in store order.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        label: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<SampleGradients> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, true);
        let logits = self.record(&mut tape, &mut binder, x, training, rng, &mut ForwardTrace::default())?;
        let loss = tape.cross_entropy(logits, &[label])?;
        let grads = tape.backward(loss)?;
        let mut bound: Vec<(usize, Var)> = binder.bound().collect();
        bound.sort_by_key(|&(i, _)| i);
        let grads = bound
            .into_iter()
            .map(|(i, v)| (i, grads.get_or_zeros(v, self.params.by_index(i).1.numel())))
            .collect();
        Ok(SampleGradients {
            loss: tape.value(loss).data()[0],
            logits: tape.value(logits).data().to_vec(),
            grads,
        })
    }

    /// Compares [`Self::loss_and_gradients`] (noise off) with central
    /// differences of the loss on every `stride`-th coordinate of each
    /// parameter tensor, starting from its first.
    pub fn gradient_check(&self, x: &Tensor, label: usize, h: f64, stride: usize) -> Result<GradCheckReport> {
        let mut still = rand::rngs::mock::StepRng::new(0, 0);
        let base = self.loss_and_gradients(x, label, false, &mut still)?;
        let again = self.loss_and_gradients(x, label, false, &mut still)?;
        if base.loss.to_bits() != again.loss.to_bits() {
            return Err(Error::OracleInvalid("model forward is nondeterministic".into()));
        }
        let mut analytic: Vec<Vec<f64>> = self.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        for (i, g) in base.grads {
            analytic[i] = g;
        }
        let loss_of = |m: &MsstModel| -> Result<f64> {
            let logits = m.logits(x)?;
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::new(&[1, logits.len()], logits)?);
            let ce = tape.cross_entropy(l, &[label])?;
            Ok(tape.value(ce).data()[0])
        };
        let mut probe = self.clone();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
        };
        for (p, a) in analytic.iter().enumerate() {
            for (j, &ga) in a.iter().enumerate().step_by(stride.max(1)) {
                let x0 = self.params.by_index(p).1.data()[j];
                probe.params.by_index_mut(p).1.data_mut()[j] = x0 + h;
                let up = loss_of(&probe)?;
                probe.params.by_index_mut(p).1.data_mut()[j] = x0 - h;
                let down = loss_of(&probe)?;
                probe.params.by_index_mut(p).1.data_mut()[j] = x0;
                let numeric = (up - down) / (2.0 * h);
                let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-8);
                report.coordinates += 1;
                if rel > report.max_rel_error || report.coordinates == 1 {
                    report.max_rel_error = rel;
                    report.worst = (p, j);
                    report.analytic = ga;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }

    /// Logits for each sample in order, one row per sample.
    pub fn forward_batch<R: Rng + ?Sized>(&self, xs: &[&Tensor], training: bool, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        xs.iter()
            .map(|x| self.forward(x, training, rng, false).map(|(l, _)| l))
            .collect()
    }
}
