//! The finite-difference suite: every differentiable primitive, both
//! attention heads, both multi-scale blocks, and the end-to-end toy model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{ssa_gc_head, tsa_head, HeadVars};
use crate::error::Result;
use crate::graph::GraphSpec;
use crate::multiscale::{multiscale_forward, MultiScaleConfig, MultiScaleParams, MultiScaleVars};
use crate::network::{ModelConfig, MsstModel};
use crate::tensor::{finite_difference_check_many, Axis, GradCheckReport, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const COMPONENT_TOL: f64 = 1e-5;
pub const END_TO_END_TOL: f64 = 1e-4;
/// Every `END_TO_END_STRIDE`-th parameter coordinate of the toy model is
/// probed; the full sweep costs two forward passes per coordinate.
pub const END_TO_END_STRIDE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Primitive,
    Head,
    MultiScale,
    EndToEnd,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub group: Group,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn from_report(name: &str, group: Group, rep: GradCheckReport, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            group,
            max_rel_error: rep.max_rel_error,
            coordinates: rep.coordinates,
            tolerance,
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts an output against fixed random weights so every output
/// coordinate contributes a distinct O(1) sensitivity.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::uniform(tape.shape(y), 1.0, &mut rng(seed));
    let rv = tape.leaf(r);
    let prod = tape.mul(y, rv)?;
    Ok(tape.sum(prod))
}

type Probe = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn primitive_cases() -> Vec<(String, Vec<Tensor>, Probe)> {
    let mut r = rng(10);
    let mut cases: Vec<(String, Vec<Tensor>, Probe)> = vec![
        (
            "matmul".into(),
            vec![Tensor::uniform(&[2, 3, 4], 1.0, &mut r), Tensor::uniform(&[4, 2], 1.0, &mut r)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 100)
            }),
        ),
        (
            "batched matmul".into(),
            vec![Tensor::uniform(&[2, 3, 4], 1.0, &mut r), Tensor::uniform(&[2, 4, 2], 1.0, &mut r)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 101)
            }),
        ),
        (
            "broadcast add and mul".into(),
            vec![Tensor::uniform(&[2, 3, 2], 1.0, &mut r), Tensor::uniform(&[3, 2], 1.0, &mut r)],
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(a, v[1])?;
                project(t, m, 102)
            }),
        ),
        (
            "scale and relu".into(),
            vec![Tensor::uniform(&[4, 3], 1.0, &mut r)],
            Box::new(|t, v| {
                let s = t.scale(v[0], 1.7);
                let y = t.relu(s);
                project(t, y, 103)
            }),
        ),
        (
            "softmax".into(),
            vec![Tensor::uniform(&[3, 5], 1.0, &mut r)],
            Box::new(|t, v| {
                let y = t.softmax_rows(v[0])?;
                project(t, y, 104)
            }),
        ),
        (
            "layer norm".into(),
            vec![
                Tensor::uniform(&[4, 6], 1.0, &mut r),
                Tensor::uniform(&[6], 1.0, &mut r),
                Tensor::uniform(&[6], 1.0, &mut r),
            ],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y, 105)
            }),
        ),
        (
            "permute, transpose and reshape".into(),
            vec![Tensor::uniform(&[2, 3, 4], 1.0, &mut r)],
            Box::new(|t, v| {
                let p = t.permute(v[0], &[1, 0, 2])?;
                let q = t.transpose(p)?;
                let y = t.reshape(q, &[12, 2])?;
                project(t, y, 106)
            }),
        ),
        (
            "concat".into(),
            vec![Tensor::uniform(&[3, 2], 1.0, &mut r), Tensor::uniform(&[3, 3], 1.0, &mut r)],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1], v[0]])?;
                project(t, y, 107)
            }),
        ),
        (
            "mean over rows".into(),
            vec![Tensor::uniform(&[3, 4, 2], 1.0, &mut r)],
            Box::new(|t, v| {
                let y = t.mean_rows(v[0]);
                project(t, y, 110)
            }),
        ),
        (
            "cross entropy".into(),
            vec![Tensor::uniform(&[3, 4], 1.0, &mut r)],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 1])),
        ),
    ];
    for (axis, dil) in [(Axis::Time, 1), (Axis::Time, 2), (Axis::Node, 1), (Axis::Node, 2)] {
        cases.push((
            format!("conv {axis:?} dilation {dil}"),
            vec![Tensor::uniform(&[6, 5, 3], 1.0, &mut r), Tensor::uniform(&[5, 3, 2], 1.0, &mut r)],
            Box::new(move |t, v| {
                let y = t.conv_axis(v[0], v[1], axis, dil)?;
                project(t, y, 108)
            }),
        ));
    }
    for axis in [Axis::Time, Axis::Node] {
        cases.push((
            format!("maxpool {axis:?}"),
            vec![Tensor::uniform(&[6, 5, 3], 1.0, &mut r)],
            Box::new(move |t, v| {
                let y = t.maxpool_axis(v[0], axis, 3)?;
                project(t, y, 109)
            }),
        ));
    }
    cases
}

fn head_cases() -> Vec<(String, Vec<Tensor>, Probe)> {
    let mut r = rng(11);
    let h = Tensor::uniform(&[2, 4, 4], 1.0, &mut r);
    let weights: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[4, 2], 1.0, &mut r)).collect();
    let gate = Tensor::uniform(&[4, 4], 1.0, &mut r);
    let mut ssa = vec![h.clone()];
    ssa.extend(weights.iter().cloned());
    ssa.push(gate);
    let mut tsa = vec![h];
    tsa.extend(weights);
    vec![
        (
            "ssa-gc head".into(),
            ssa,
            Box::new(|t, v| {
                let hv = HeadVars { wq: v[1], wk: v[2], wv: v[3] };
                let (o, _) = ssa_gc_head(t, v[0], v[0], &hv, v[4])?;
                project(t, o, 120)
            }),
        ),
        (
            "tsa head".into(),
            tsa,
            Box::new(|t, v| {
                let hv = HeadVars { wq: v[1], wk: v[2], wv: v[3] };
                let (o, _) = tsa_head(t, v[0], v[0], &hv)?;
                project(t, o, 121)
            }),
        ),
    ]
}

fn multiscale_cases() -> Result<Vec<(String, Vec<Tensor>, Probe)>> {
    let mut out: Vec<(String, Vec<Tensor>, Probe)> = Vec::new();
    for (name, cfg) in [
        ("ms-tc block", MultiScaleConfig::temporal(3, 8)?),
        ("ms-sc block", MultiScaleConfig::spatial(3, 8)?),
    ] {
        let p = MultiScaleParams::init(&cfg, &mut rng(12));
        let mut inputs = vec![Tensor::uniform(&[6, 5, 3], 1.0, &mut rng(13))];
        inputs.extend(p.pointwise.iter().cloned());
        inputs.extend(p.pointwise_bias.iter().cloned());
        inputs.extend(p.conv.iter().cloned());
        out.push((
            name.into(),
            inputs,
            Box::new(move |t, v| {
                let vars = MultiScaleVars {
                    pointwise: [v[1], v[2], v[3], v[4]],
                    pointwise_bias: [v[5], v[6], v[7], v[8]],
                    conv: [v[9], v[10]],
                };
                let y = multiscale_forward(t, v[0], &cfg, &vars)?;
                project(t, y, 122)
            }),
        ));
    }
    Ok(out)
}

/// The toy network (N=3 chain, T=8, base 8, two heads, two classes) and one input.
pub fn toy_model(seed: u64) -> Result<(MsstModel, Tensor)> {
    let graph = GraphSpec::build("chain3", &[-1, 0, 1])?;
    let mut r = rng(seed);
    let model = MsstModel::new(ModelConfig::toy(), &graph, &mut r)?;
    let x = Tensor::uniform(&[8, 3, 3], 1.0, &mut r);
    Ok((model, x))
}

/// Checks only the per-component cases.
pub fn run_components() -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let groups = [
        (Group::Primitive, primitive_cases()),
        (Group::Head, head_cases()),
        (Group::MultiScale, multiscale_cases()?),
    ];
    for (group, cases) in groups {
        for (name, inputs, f) in cases {
            let rep = finite_difference_check_many(f, &inputs, STEP)?;
            out.push(SuiteEntry::from_report(&name, group, rep, COMPONENT_TOL));
        }
    }
    Ok(out)
}

pub fn run_end_to_end(stride: usize) -> Result<SuiteEntry> {
    let (model, x) = toy_model(20)?;
    let rep = model.gradient_check(&x, 1, STEP, stride)?;
    Ok(SuiteEntry::from_report("toy model end to end", Group::EndToEnd, rep, END_TO_END_TOL))
}

/// The whole suite, components first.
pub fn run_all(stride: usize) -> Result<Vec<SuiteEntry>> {
    let mut out = run_components()?;
    out.push(run_end_to_end(stride)?);
    Ok(out)
}
