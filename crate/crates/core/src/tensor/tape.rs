use super::kernels::{self, AxisGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis of a `[T, N, C]` skeleton feature tensor along which a convolution or
/// pooling window slides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Time,
    Node,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::Time => 0,
            Axis::Node => 1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Scale {
        a: Var,
        s: f64,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Conv {
        x: Var,
        w: Var,
        geom: AxisGeom,
        kernel: usize,
        dilation: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows {
        a: Var,
    },
    Sum {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of operations. Inputs always precede the operations
/// that consume them, so reverse index order is a valid backward schedule.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`] for leaves and parameters,
/// indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn broadcast_map(a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    let err = || Error::Shape(format!("cannot broadcast {b:?} onto {a:?}"));
    if b.len() > a.len() {
        return Err(err());
    }
    let lead = a.len() - b.len();
    let mut bstride = vec![0usize; a.len()];
    let mut s = 1;
    for i in (0..b.len()).rev() {
        let (da, db) = (a[lead + i], b[i]);
        if db == da {
            bstride[lead + i] = s;
        } else if db != 1 {
            return Err(err());
        }
        s *= db;
    }
    let n: usize = a.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            off += bstride[d];
            if idx[d] < a[d] {
                break;
            }
            off -= bstride[d] * a[d];
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_owned(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. A rank-2 right operand
    /// is shared across every batch slice of the left one.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || {
            Error::Shape(format!("matmul of {sa:?} and {sb:?}: inner or batch dimensions differ"))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let shared_b = sb.len() == 2 && sa.len() > 2;
        if !shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            // Fold the batch into the row dimension.
            kernels::gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            &[a, b],
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        ))
    }

    /// Elementwise `a + b`, with `b` broadcast onto the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = match &map {
            None => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Some(m) => av.iter().zip(m).map(|(x, &j)| x + bv[j]).collect(),
        };
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, &[a, b], Op::Add { a, b, map }))
    }

    /// Elementwise `a ⊙ b`, with `b` broadcast onto the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = match &map {
            None => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            Some(m) => av.iter().zip(m).map(|(x, &j)| x * bv[j]).collect(),
        };
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, &[a, b], Op::Mul { a, b, map }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v * s).collect()).unwrap();
        self.push(value, &[a], Op::Scale { a, s })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        self.push(value, &[a], Op::Relu { a })
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        t.check_finite("softmax input")?;
        let m = *t.shape().last().unwrap();
        let value = Tensor::new(t.shape(), kernels::softmax_rows(t.data(), m))?;
        Ok(self.push(value, &[a], Op::Softmax { a }))
    }

    /// Normalizes each trailing channel vector to zero mean and unit variance
    /// (with `1e-5` added to the variance), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::Shape(format!(
                "layer norm over {c} channels with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (xhat, rstd) = kernels::layer_norm_stats(self.value(x).data(), c);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % c] + b[i % c])
            .collect();
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            &[a],
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, &[a], Op::Reshape { a }))
    }

    /// Concatenates along the trailing axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!(
                    "concat: leading dims {:?} vs {lead:?}",
                    &s[..s.len() - 1]
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        let recorded = parts.iter().copied().zip(widths).collect();
        Ok(self.push(value, parts, Op::Concat { parts: recorded }))
    }

    /// Same-padded 1-D convolution along `axis` of a `[.., C_in]` tensor with
    /// weights `[kernel, C_in, C_out]`, stride 1.
    pub fn conv_axis(&mut self, x: Var, w: Var, axis: Axis, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let ax = axis.index();
        if xs.len() < 2 || ax + 1 >= xs.len() {
            return Err(Error::Shape(format!("cannot convolve {xs:?} along {axis:?}")));
        }
        if ws.len() != 3 || ws[1] != xs[xs.len() - 1] {
            return Err(Error::Shape(format!(
                "conv weights {ws:?} do not match input channels of {xs:?}"
            )));
        }
        let kernel = ws[0];
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("conv kernel must be odd, got {kernel}")));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        let c_out = ws[2];
        let geom = AxisGeom::from_shape(&xs, ax);
        let out = kernels::conv_forward(
            self.value(x).data(),
            geom,
            self.value(w).data(),
            kernel,
            dilation,
            c_out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = c_out;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            &[x, w],
            Op::Conv {
                x,
                w,
                geom,
                kernel,
                dilation,
            },
        ))
    }

    /// Same-padded windowed max along `axis` (`-inf` padding).
    pub fn maxpool_axis(&mut self, x: Var, axis: Axis, window: usize) -> Result<Var> {
        if window % 2 == 0 {
            return Err(Error::Config(format!("pool window must be odd, got {window}")));
        }
        let xs = self.shape(x).to_vec();
        let ax = axis.index();
        if xs.len() < 2 || ax + 1 >= xs.len() {
            return Err(Error::Shape(format!("cannot pool {xs:?} along {axis:?}")));
        }
        let geom = AxisGeom::from_shape(&xs, ax);
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), geom, window);
        let value = Tensor::new(&xs, out)?;
        Ok(self.push(value, &[x], Op::MaxPool { x, argmax }))
    }

    /// Averages over every leading axis, leaving the trailing channel vector.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = *t.shape().last().unwrap();
        let rows = t.numel() / c;
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let value = Tensor::new(&[c], out).unwrap();
        self.push(value, &[a], Op::MeanRows { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum { a })
    }

    /// Batch-mean of `-log softmax(logits)[label]` for `[B, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy of logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label {
                label: bad,
                classes: k,
            });
        }
        let lv = self.value(logits);
        lv.check_finite("logits")?;
        let probs = kernels::softmax_rows(lv.data(), k);
        let mut loss = 0.0;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![0.0; av.len()];
                    if shared_b {
                        kernels::gemm(batch * m, n, k, dy, false, bv, true, &mut da, false);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &dy[i * m * n..],
                                false,
                                &bv[i * k * n..],
                                true,
                                &mut da[i * m * k..],
                                false,
                            );
                        }
                    }
                    accumulate_owned(&mut grads[a.0], da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; bv.len()];
                    if shared_b {
                        kernels::gemm(k, batch * m, n, av, true, dy, false, &mut db, false);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &av[i * m * k..(i + 1) * m * k],
                                true,
                                &dy[i * m * n..],
                                false,
                                &mut db[i * k * n..],
                                false,
                            );
                        }
                    }
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            Op::Add { a, b, map } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy);
                }
                if self.wants(*b) {
                    match map {
                        None => accumulate(&mut grads[b.0], dy),
                        Some(map) => {
                            let mut db = vec![0.0; self.value(*b).numel()];
                            for (g, &j) in dy.iter().zip(map) {
                                db[j] += g;
                            }
                            accumulate_owned(&mut grads[b.0], db);
                        }
                    }
                }
            }
            Op::Mul { a, b, map } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da: Vec<f64> = match map {
                        None => dy.iter().zip(bv).map(|(g, y)| g * y).collect(),
                        Some(map) => dy.iter().zip(map).map(|(g, &j)| g * bv[j]).collect(),
                    };
                    accumulate_owned(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let db = match map {
                        None => dy.iter().zip(av).map(|(g, x)| g * x).collect(),
                        Some(map) => {
                            let mut db = vec![0.0; bv.len()];
                            for ((g, x), &j) in dy.iter().zip(av).zip(map) {
                                db[j] += g * x;
                            }
                            db
                        }
                    };
                    accumulate_owned(&mut grads[b.0], db);
                }
            }
            &Op::Scale { a, s } => {
                if self.wants(a) {
                    accumulate_owned(&mut grads[a.0], dy.iter().map(|g| g * s).collect());
                }
            }
            &Op::Relu { a } => {
                if self.wants(a) {
                    let x = self.value(a).data();
                    let da = dy
                        .iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate_owned(&mut grads[a.0], da);
                }
            }
            &Op::Softmax { a } => {
                if self.wants(a) {
                    let m = *node.value.shape().last().unwrap();
                    let da = kernels::softmax_rows_backward(node.value.data(), dy, m);
                    accumulate_owned(&mut grads[a.0], da);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (dx, dgain, dbias) =
                    kernels::layer_norm_backward(xhat, rstd, self.value(*gain).data(), dy);
                if self.wants(*x) {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if self.wants(*gain) {
                    accumulate_owned(&mut grads[gain.0], dgain);
                }
                if self.wants(*bias) {
                    accumulate_owned(&mut grads[bias.0], dbias);
                }
            }
            Op::Permute { a, perm } => {
                if self.wants(*a) {
                    let (da, _) = permute_data(dy, node.value.shape(), &inverse_perm(perm));
                    accumulate_owned(&mut grads[a.0], da);
                }
            }
            &Op::Reshape { a } => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], dy);
                }
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = dy.len() / total;
                let mut col = 0;
                for &(p, w) in parts {
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&dy[r * total + col..r * total + col + w]);
                        }
                        accumulate_owned(&mut grads[p.0], dp);
                    }
                    col += w;
                }
            }
            &Op::Conv {
                x,
                w,
                geom,
                kernel,
                dilation,
            } => {
                let c_out = *node.value.shape().last().unwrap();
                let (dx, dw) = kernels::conv_backward(
                    self.value(x).data(),
                    geom,
                    self.value(w).data(),
                    kernel,
                    dilation,
                    c_out,
                    dy,
                );
                if self.wants(x) {
                    accumulate_owned(&mut grads[x.0], dx);
                }
                if self.wants(w) {
                    accumulate_owned(&mut grads[w.0], dw);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    for (g, &src) in dy.iter().zip(argmax) {
                        dx[src] += g;
                    }
                    accumulate_owned(&mut grads[x.0], dx);
                }
            }
            &Op::MeanRows { a } => {
                if self.wants(a) {
                    let n = self.value(a).numel();
                    let c = dy.len();
                    let rows = (n / c) as f64;
                    let da = (0..n).map(|i| dy[i % c] / rows).collect();
                    accumulate_owned(&mut grads[a.0], da);
                }
            }
            &Op::Sum { a } => {
                if self.wants(a) {
                    let n = self.value(a).numel();
                    accumulate_owned(&mut grads[a.0], vec![dy[0]; n]);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let k = probs.len() / labels.len();
                    let scale = dy[0] / labels.len() as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        dl[r * k + y] -= scale;
                    }
                    accumulate_owned(&mut grads[logits.0], dl);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::eye(2));
        let m = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);

        let p = tape.leaf(t(&[2, 2], &[1., 0., 0., 0.]));
        let m = tape.leaf(t(&[2, 2], &[5., 6., 7., 8.]));
        let out = tape.matmul(p, m).unwrap();
        assert_eq!(tape.value(out).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let expected = naive_matmul(&a, &b);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let out = tape.matmul(va, vb).unwrap();
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn batched_and_shared_matmul_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::uniform(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let va = tape.leaf(a.clone());
        let vb = tape.leaf(b.clone());
        let shared = tape.matmul(va, vb).unwrap();
        let mut stacked = b.data().to_vec();
        stacked.extend_from_slice(b.data());
        let vb2 = tape.leaf(t(&[2, 4, 5], &stacked));
        let batched = tape.matmul(va, vb2).unwrap();
        assert!(tape.value(shared).max_abs_diff(tape.value(batched)) < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0., 0.]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.leaf(t(&[1, 3], &[1000., 1000., 1000.]));
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.leaf(t(&[1, 3], &[1., 2., 3.]));
        let y = tape.softmax_rows(x).unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        for (i, v) in tape.value(y).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[f64::NAN, 0.]));
        assert!(tape.softmax_rows(x).is_err());
    }

    fn naive_conv(x: &Tensor, w: &Tensor, axis: Axis, dilation: usize) -> Tensor {
        let (tn, nn, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, co) = (w.shape()[0], w.shape()[2]);
        let pad = (dilation * (k - 1) / 2) as isize;
        let mut out = Tensor::zeros(&[tn, nn, co]);
        for t in 0..tn {
            for n in 0..nn {
                for o in 0..co {
                    let mut s = 0.0;
                    for tap in 0..k {
                        let off = (tap * dilation) as isize - pad;
                        let (st, sn) = match axis {
                            Axis::Time => (t as isize + off, n as isize),
                            Axis::Node => (t as isize, n as isize + off),
                        };
                        if st < 0 || sn < 0 || st >= tn as isize || sn >= nn as isize {
                            continue;
                        }
                        for c in 0..ci {
                            s += x.get(&[st as usize, sn as usize, c]) * w.get(&[tap, c, o]);
                        }
                    }
                    out.set(&[t, n, o], s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[5, 3, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let vx = tape.leaf(x.clone());
        let w = tape.leaf(Tensor::eye(2).reshape(&[1, 2, 2]).unwrap());
        let y = tape.conv_axis(vx, w, Axis::Time, 1).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_dilated_constant_signal() {
        let c = 1.5;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[7, 1, 1], c));
        let w = tape.leaf(Tensor::ones(&[3, 1, 1]));
        let y = tape.conv_axis(x, w, Axis::Time, 2).unwrap();
        let expected = [2. * c, 2. * c, 3. * c, 3. * c, 3. * c, 2. * c, 2. * c];
        assert_eq!(tape.value(y).data(), &expected);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(axis, k, d) in &[
            (Axis::Time, 5, 1),
            (Axis::Time, 5, 2),
            (Axis::Node, 5, 1),
            (Axis::Node, 3, 2),
            (Axis::Node, 5, 2),
        ] {
            let x = Tensor::uniform(&[6, 4, 3], 1.0, &mut rng);
            let w = Tensor::uniform(&[k, 3, 2], 1.0, &mut rng);
            let expected = naive_conv(&x, &w, axis, d);
            let mut tape = Tape::new();
            let (vx, vw) = (tape.leaf(x), tape.leaf(w));
            let y = tape.conv_axis(vx, vw, axis, d).unwrap();
            assert_eq!(tape.shape(y), &[6, 4, 2]);
            assert!(tape.value(y).max_abs_diff(&expected) < 1e-10);
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 2, 1]));
        let w = tape.leaf(Tensor::zeros(&[2, 1, 1]));
        assert!(matches!(
            tape.conv_axis(x, w, Axis::Time, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 1, 1], &[1., 2., 3., 4.]));
        let y = tape.maxpool_axis(x, Axis::Time, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[2., 3., 4., 4.]);

        let x = tape.leaf(Tensor::full(&[1, 5, 2], -2.0));
        let y = tape.maxpool_axis(x, Axis::Node, 3).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn maxpool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[5, 4, 3], 1.0, &mut rng);
        for axis in [Axis::Time, Axis::Node] {
            let mut tape = Tape::new();
            let vx = tape.leaf(x.clone());
            let y = tape.maxpool_axis(vx, axis, 3).unwrap();
            for t in 0..5usize {
                for n in 0..4usize {
                    for c in 0..3 {
                        let mut best = f64::NEG_INFINITY;
                        for d in -1isize..=1 {
                            let (st, sn) = match axis {
                                Axis::Time => (t as isize + d, n as isize),
                                Axis::Node => (t as isize, n as isize + d),
                            };
                            if (0..5).contains(&st) && (0..4).contains(&sn) {
                                best = best.max(x.get(&[st as usize, sn as usize, c]));
                            }
                        }
                        assert_eq!(tape.value(y).get(&[t, n, c]), best);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::ones(&[2]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let x = tape.leaf(t(&[2], &[1., -1.]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (v, e) in tape.value(y).data().iter().zip([expected, -expected]) {
            assert!((v - e).abs() < 1e-15);
        }
        let g = tape.leaf(Tensor::ones(&[3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let x = tape.leaf(Tensor::full(&[3], 4.2));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[3, 6], 2.0, &mut rng);
        let g = Tensor::uniform(&[6], 1.0, &mut rng);
        let b = Tensor::uniform(&[6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (vx, vg, vb) = (tape.leaf(x.clone()), tape.leaf(g.clone()), tape.leaf(b.clone()));
        let y = tape.layer_norm(vx, vg, vb).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = (0..6).map(|j| x.get(&[r, j])).collect();
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for j in 0..6 {
                let e = (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j];
                assert!((tape.value(y).get(&[r, j]) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., -2., 5.]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_subexpression_matches_unshared() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let wv = Tensor::uniform(&[3, 3], 1.0, &mut rng);

        let mut shared = Tape::new();
        let x = shared.param(xv.clone());
        let w = shared.leaf(wv.clone());
        let h = shared.matmul(x, w).unwrap();
        let hh = shared.mul(h, h).unwrap();
        let hs = shared.add(hh, h).unwrap();
        let loss = shared.sum(hs);
        let g1 = shared.backward(loss).unwrap();

        let mut unshared = Tape::new();
        let x2 = unshared.param(xv);
        let w2 = unshared.leaf(wv);
        let ha = unshared.matmul(x2, w2).unwrap();
        let hb = unshared.matmul(x2, w2).unwrap();
        let hc = unshared.matmul(x2, w2).unwrap();
        let hh = unshared.mul(ha, hb).unwrap();
        let hs = unshared.add(hh, hc).unwrap();
        let loss = unshared.sum(hs);
        let g2 = unshared.backward(loss).unwrap();

        for (a, b) in g1.get(x).unwrap().iter().zip(g2.get(x2).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_add_over_frames_and_joints() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::zeros(&[2, 3, 2]));
        let spe = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.add(h, spe).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1., 2., 3., 4., 5., 6., 1., 2., 3., 4., 5., 6.]
        );
        let tpe = tape.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let y = tape.add(h, tpe).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1., 2., 1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]
        );
        let bad = tape.leaf(Tensor::zeros(&[4]));
        assert!(tape.add(h, bad).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[2, 3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let p = tape.permute(v, &[1, 0, 2]).unwrap();
        assert_eq!(tape.shape(p), &[3, 2, 4]);
        assert_eq!(tape.value(p).get(&[2, 1, 3]), x.get(&[1, 2, 3]));
        let back = tape.permute(p, &[1, 0, 2]).unwrap();
        assert_eq!(tape.value(back), &x);
        assert!(tape.permute(v, &[0, 0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 4]));
        let loss = tape.cross_entropy(l, &[2]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);

        let l = tape.leaf(t(&[1, 3], &[0., 1000., 0.]));
        let loss = tape.cross_entropy(l, &[1]).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-12);

        let l = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.cross_entropy(l, &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }
}
