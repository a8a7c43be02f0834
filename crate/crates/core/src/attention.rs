//! Spatial self-attention graph convolution (attention over the joints of a
//! frame, gated elementwise by a learnable topology) and temporal
//! self-attention (attention over the frames of a joint).
//!
//! Scores are `(H W_K)(H W_Q)^T / sqrt(D')`, normalized with a softmax over
//! the last index. Positional tables are added to the query/key input only.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Learnable matrices of one attention head, each `D x D'`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// `M` heads plus the fusing output projection `W_O: D x D_out`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    pub wo: Tensor,
}

impl AttentionParams {
    /// Uniform `(-1/sqrt(D), 1/sqrt(D))` init. Fails when `heads` does not divide `d_in`.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let head_dim = head_dim(d_in, heads)?;
        let bound = 1.0 / (d_in as f64).sqrt();
        let heads = (0..heads)
            .map(|_| HeadParams {
                wq: Tensor::uniform(&[d_in, head_dim], bound, rng),
                wk: Tensor::uniform(&[d_in, head_dim], bound, rng),
                wv: Tensor::uniform(&[d_in, head_dim], bound, rng),
            })
            .collect();
        Ok(Self {
            heads,
            wo: Tensor::uniform(&[d_in, d_out], bound, rng),
        })
    }
}

pub fn head_dim(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Head matrices registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    Spatial,
    Temporal,
}

/// Adds a positional table to `[T, N, D]` features: a spatial table `[N, D]`
/// is broadcast over frames, a temporal table `[T, D]` over joints.
pub fn add_positional(tape: &mut Tape, h: Var, pe: Var, which: PositionKind) -> Result<Var> {
    let hs = tape.shape(h).to_vec();
    let ps = tape.shape(pe).to_vec();
    if hs.len() != 3 {
        return Err(Error::Shape(format!("positional add expects T x N x D, got {hs:?}")));
    }
    let (t, n, d) = (hs[0], hs[1], hs[2]);
    match which {
        PositionKind::Spatial => {
            if ps != [n, d] {
                return Err(Error::Shape(format!("spatial table {ps:?} for features {hs:?}")));
            }
            tape.add(h, pe)
        }
        PositionKind::Temporal => {
            if ps != [t, d] {
                return Err(Error::Shape(format!("temporal table {ps:?} for features {hs:?}")));
            }
            let pe3 = tape.reshape(pe, &[t, 1, d])?;
            tape.add(h, pe3)
        }
    }
}

/// One head over `[.., L, D]` rows. Returns `(output [.., L, D'], map [.., L, L])`
/// where `map` is the softmax before any topology gating.
fn attention_head(
    tape: &mut Tape,
    h: Var,
    h_qk: Var,
    head: &HeadVars,
    topology: Option<Var>,
) -> Result<(Var, Var)> {
    let q = tape.matmul(h_qk, head.wq)?;
    let k = tape.matmul(h_qk, head.wk)?;
    let v = tape.matmul(h, head.wv)?;
    let d_head = *tape.shape(q).last().unwrap();
    let qt = tape.transpose(q)?;
    let scores = tape.matmul(k, qt)?;
    let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
    let map = tape.softmax_rows(scaled)?;
    let weights = match topology {
        Some(a) => tape.mul(map, a)?,
        None => map,
    };
    let out = tape.matmul(weights, v)?;
    Ok((out, map))
}

/// `{Ã ⊙ softmax(H W_K (H W_Q)^T / sqrt(D'))} H W_V` for each frame.
///
/// `h` is `[N, D]` or `[T, N, D]`; `h_qk` is `h` with the spatial table added.
pub fn ssa_gc_head(
    tape: &mut Tape,
    h: Var,
    h_qk: Var,
    head: &HeadVars,
    topology: Var,
) -> Result<(Var, Var)> {
    let n = tape.shape(h)[tape.shape(h).len() - 2];
    if tape.shape(topology) != [n, n] {
        return Err(Error::Shape(format!(
            "topology {:?} for {n} joints",
            tape.shape(topology)
        )));
    }
    attention_head(tape, h, h_qk, head, Some(topology))
}

/// `softmax(H W_K (H W_Q)^T / sqrt(D')) H W_V` for each joint.
///
/// `h` is `[T, D]` or `[N, T, D]` (frames on the second-to-last axis).
pub fn tsa_head(tape: &mut Tape, h: Var, h_qk: Var, head: &HeadVars) -> Result<(Var, Var)> {
    attention_head(tape, h, h_qk, head, None)
}

/// Concatenates head outputs along channels, then projects with `W_O`.
pub fn multi_head_fuse(tape: &mut Tape, heads: &[Var], wo: Var) -> Result<Var> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Shape("no heads to fuse".into()))?;
    let lead = tape.shape(*first)[..tape.shape(*first).len() - 1].to_vec();
    for &h in heads {
        let s = tape.shape(h);
        if s[..s.len() - 1] != lead[..] {
            return Err(Error::Shape(format!(
                "head outputs have mismatched lengths: {:?} vs {lead:?}",
                &s[..s.len() - 1]
            )));
        }
    }
    let cat = tape.concat(heads)?;
    tape.matmul(cat, wo)
}

/// Multi-head SSA-GC over `[T, N, D]` features. `topology[m]` gates head `m`.
/// Returns the fused `[T, N, D_out]` output and each head's `[T, N, N]` map.
pub fn spatial_attention(
    tape: &mut Tape,
    h: Var,
    spe: Var,
    heads: &[HeadVars],
    topology: &[Var],
    wo: Var,
) -> Result<(Var, Vec<Var>)> {
    if heads.len() != topology.len() {
        return Err(Error::Shape(format!(
            "{} heads but {} topology matrices",
            heads.len(),
            topology.len()
        )));
    }
    let h_qk = add_positional(tape, h, spe, PositionKind::Spatial)?;
    let mut outs = Vec::with_capacity(heads.len());
    let mut maps = Vec::with_capacity(heads.len());
    for (head, &a) in heads.iter().zip(topology) {
        let (o, m) = ssa_gc_head(tape, h, h_qk, head, a)?;
        outs.push(o);
        maps.push(m);
    }
    Ok((multi_head_fuse(tape, &outs, wo)?, maps))
}

/// Multi-head TSA over `[T, N, D]` features. Returns the fused `[T, N, D_out]`
/// output and each head's `[N, T, T]` map.
pub fn temporal_attention(
    tape: &mut Tape,
    h: Var,
    tpe: Var,
    heads: &[HeadVars],
    wo: Var,
) -> Result<(Var, Vec<Var>)> {
    let h_qk = add_positional(tape, h, tpe, PositionKind::Temporal)?;
    let hn = tape.permute(h, &[1, 0, 2])?;
    let hn_qk = tape.permute(h_qk, &[1, 0, 2])?;
    let mut outs = Vec::with_capacity(heads.len());
    let mut maps = Vec::with_capacity(heads.len());
    for head in heads {
        let (o, m) = tsa_head(tape, hn, hn_qk, head)?;
        outs.push(o);
        maps.push(m);
    }
    let fused = multi_head_fuse(tape, &outs, wo)?;
    Ok((tape.permute(fused, &[1, 0, 2])?, maps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Spatial,
    Temporal,
}

/// One exported attention map: spatial maps are averaged over frames
/// (`N x N`), temporal maps over joints (`T x T`).
#[derive(Clone, Debug, Serialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub kind: MapKind,
    pub map: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, Serialize)]
#[serde(transparent)]
pub struct AttentionMaps {
    pub maps: Vec<AttentionMap>,
}

impl AttentionMaps {
    /// Records a `[B, L, L]` stack of row-stochastic maps as their mean over `B`.
    pub fn record(&mut self, layer: usize, head: usize, kind: MapKind, stack: &Tensor) {
        let s = stack.shape();
        let l = s[s.len() - 1];
        let b = stack.numel() / (l * l);
        let mut mean = vec![vec![0.0; l]; l];
        for slice in stack.data().chunks(l * l) {
            for (i, row) in slice.chunks(l).enumerate() {
                for (m, v) in mean[i].iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        for row in &mut mean {
            row.iter_mut().for_each(|v| *v /= b as f64);
        }
        self.maps.push(AttentionMap {
            layer,
            head,
            kind,
            map: mean,
        });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("maps serialize")
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::finite_difference_check_many;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    struct Head {
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
    }

    impl Head {
        fn random(d: usize, dh: usize, seed: u64) -> Self {
            let mut r = rng(seed);
            Self {
                wq: Tensor::uniform(&[d, dh], 1.0, &mut r),
                wk: Tensor::uniform(&[d, dh], 1.0, &mut r),
                wv: Tensor::uniform(&[d, dh], 1.0, &mut r),
            }
        }

        fn bind(&self, tape: &mut Tape) -> HeadVars {
            HeadVars {
                wq: tape.param(self.wq.clone()),
                wk: tape.param(self.wk.clone()),
                wv: tape.param(self.wv.clone()),
            }
        }
    }

    /// Scalar evaluation of one head on `L x D` rows, written out index by
    /// index without the tape.
    fn scalar_head(h: &Tensor, head: &Head, gate: Option<&Tensor>) -> Vec<Vec<f64>> {
        let (l, d) = (h.shape()[0], h.shape()[1]);
        let dh = head.wq.shape()[1];
        let proj = |w: &Tensor, i: usize, c: usize| (0..d).map(|p| h.get(&[i, p]) * w.get(&[p, c])).sum::<f64>();
        let mut out = vec![vec![0.0; dh]; l];
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|c| proj(&head.wk, i, c) * proj(&head.wq, j, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..l {
                let mut a = scores[j].exp() / z;
                if let Some(g) = gate {
                    a *= g.get(&[i, j]);
                }
                for c in 0..dh {
                    out[i][c] += a * proj(&head.wv, j, c);
                }
            }
        }
        out
    }

    fn close(a: &Tensor, b: &[Vec<f64>], tol: f64) {
        let flat: Vec<f64> = b.concat();
        assert_eq!(a.numel(), flat.len());
        for (x, y) in a.data().iter().zip(&flat) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn ssa_single_joint_with_ones_topology_is_value_projection() {
        let head = Head::random(3, 2, 1);
        let h = rows(&[&[0.3, -0.2, 0.9]]);
        let mut tape = Tape::new();
        let hv = tape.leaf(h.clone());
        let vars = head.bind(&mut tape);
        let a = tape.leaf(Tensor::ones(&[1, 1]));
        let (out, _) = ssa_gc_head(&mut tape, hv, hv, &vars, a).unwrap();
        let wv = tape.leaf(head.wv.clone());
        let expected = tape.matmul(hv, wv).unwrap();
        assert_eq!(tape.value(out), tape.value(expected));
    }

    #[test]
    fn ssa_zero_topology_annihilates() {
        let head = Head::random(4, 2, 2);
        let h = Tensor::uniform(&[5, 4], 1.0, &mut rng(3));
        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let vars = head.bind(&mut tape);
        let a = tape.leaf(Tensor::zeros(&[5, 5]));
        let (out, _) = ssa_gc_head(&mut tape, hv, hv, &vars, a).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ssa_two_joint_hand_evaluation() {
        let head = Head {
            wq: rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, -0.5]]),
            wk: rows(&[&[0.0, 1.0], &[1.0, 0.0], &[-1.0, 0.5]]),
            wv: rows(&[&[1.0, 2.0], &[-1.0, 0.0], &[0.0, 1.0]]),
        };
        let h = rows(&[&[0.2, -0.4, 1.0], &[0.7, 0.1, -0.3]]);
        let gate = rows(&[&[0.6, 0.4], &[0.25, 1.5]]);
        let expected = scalar_head(&h, &head, Some(&gate));

        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let vars = head.bind(&mut tape);
        let a = tape.leaf(gate);
        let (out, map) = ssa_gc_head(&mut tape, hv, hv, &vars, a).unwrap();
        close(tape.value(out), &expected, 1e-12);
        for row in tape.value(map).data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tsa_examples() {
        let head = Head::random(3, 3, 4);
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape);

        let h1 = tape.leaf(rows(&[&[0.1, 0.5, -0.2]]));
        let (out, _) = tsa_head(&mut tape, h1, h1, &vars).unwrap();
        let proj = tape.matmul(h1, vars.wv).unwrap();
        assert_eq!(tape.value(out), tape.value(proj));

        let twin = tape.leaf(rows(&[&[0.3, -0.1, 0.8], &[0.3, -0.1, 0.8]]));
        let (out, _) = tsa_head(&mut tape, twin, twin, &vars).unwrap();
        let o = tape.value(out).to_rows();
        assert_eq!(o[0], o[1]);
    }

    #[test]
    fn tsa_three_frame_hand_evaluation() {
        let head = Head {
            wq: rows(&[&[0.5, -1.0], &[1.0, 0.25]]),
            wk: rows(&[&[1.0, 0.5], &[-0.5, 1.0]]),
            wv: rows(&[&[2.0, 0.0], &[1.0, -1.0]]),
        };
        let h = rows(&[&[1.0, 0.0], &[0.5, -0.5], &[-0.2, 0.9]]);
        let expected = scalar_head(&h, &head, None);
        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let vars = head.bind(&mut tape);
        let (out, _) = tsa_head(&mut tape, hv, hv, &vars).unwrap();
        close(tape.value(out), &expected, 1e-12);
    }

    #[test]
    fn ones_topology_matches_ungated_formula() {
        let head = Head::random(4, 2, 5);
        let h = Tensor::uniform(&[6, 4], 1.0, &mut rng(6));
        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let vars = head.bind(&mut tape);
        let ones = tape.leaf(Tensor::ones(&[6, 6]));
        let (s, _) = ssa_gc_head(&mut tape, hv, hv, &vars, ones).unwrap();
        let (t, _) = tsa_head(&mut tape, hv, hv, &vars).unwrap();
        assert_eq!(tape.value(s), tape.value(t));
    }

    #[test]
    fn positional_examples() {
        let mut r = rng(7);
        let h = Tensor::uniform(&[3, 4, 2], 1.0, &mut r);
        let spe = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let tpe = Tensor::uniform(&[3, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let hv = tape.leaf(h.clone());

        let zero = tape.leaf(Tensor::zeros(&[4, 2]));
        let same = add_positional(&mut tape, hv, zero, PositionKind::Spatial).unwrap();
        assert_eq!(tape.value(same), &h);

        let z = tape.leaf(Tensor::zeros(&[3, 4, 2]));
        let sv = tape.leaf(spe.clone());
        let out = add_positional(&mut tape, z, sv, PositionKind::Spatial).unwrap();
        for t in 0..3 {
            for n in 0..4 {
                for d in 0..2 {
                    assert_eq!(tape.value(out).get(&[t, n, d]), spe.get(&[n, d]));
                }
            }
        }

        let tv = tape.leaf(tpe);
        let st = add_positional(&mut tape, hv, sv, PositionKind::Spatial).unwrap();
        let st = add_positional(&mut tape, st, tv, PositionKind::Temporal).unwrap();
        let ts = add_positional(&mut tape, hv, tv, PositionKind::Temporal).unwrap();
        let ts = add_positional(&mut tape, ts, sv, PositionKind::Spatial).unwrap();
        assert!(tape.value(st).max_abs_diff(tape.value(ts)) < 1e-15);

        assert!(add_positional(&mut tape, hv, tv, PositionKind::Spatial).is_err());
    }

    #[test]
    fn fuse_examples() {
        let mut tape = Tape::new();
        let h = Tensor::uniform(&[4, 3], 1.0, &mut rng(8));
        let hv = tape.leaf(h.clone());
        let eye = tape.leaf(Tensor::eye(3));
        let out = multi_head_fuse(&mut tape, &[hv], eye).unwrap();
        assert_eq!(tape.value(out), &h);

        // e1-aligned unit rows from two heads land in disjoint channel slots
        let a = tape.leaf(rows(&[&[1.0, 0.0], &[1.0, 0.0]]));
        let b = tape.leaf(rows(&[&[1.0, 0.0], &[1.0, 0.0]]));
        let eye4 = tape.leaf(Tensor::eye(4));
        let out = multi_head_fuse(&mut tape, &[a, b], eye4).unwrap();
        assert_eq!(tape.value(out).to_rows(), vec![vec![1., 0., 1., 0.]; 2]);

        let bad = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(multi_head_fuse(&mut tape, &[a, bad], eye4).is_err());
    }

    #[test]
    fn fuse_matches_concat_matmul_oracle() {
        let mut r = rng(9);
        let heads: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[5, 2], 1.0, &mut r)).collect();
        let wo = Tensor::uniform(&[6, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let hv: Vec<Var> = heads.iter().map(|h| tape.leaf(h.clone())).collect();
        let wv = tape.leaf(wo.clone());
        let out = multi_head_fuse(&mut tape, &hv, wv).unwrap();
        for i in 0..5 {
            for o in 0..4 {
                let mut s = 0.0;
                for (m, h) in heads.iter().enumerate() {
                    for c in 0..2 {
                        s += h.get(&[i, c]) * wo.get(&[m * 2 + c, o]);
                    }
                }
                assert!((tape.value(out).get(&[i, o]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        assert!(AttentionParams::init(64, 64, 3, &mut rng(0)).is_err());
        let p = AttentionParams::init(12, 24, 3, &mut rng(0)).unwrap();
        assert_eq!(p.heads.len(), 3);
        assert_eq!(p.heads[0].wq.shape(), &[12, 4]);
        assert_eq!(p.wo.shape(), &[12, 24]);
        let bound = 1.0 / 12f64.sqrt();
        assert!(p.wo.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn recorded_maps_are_row_stochastic() {
        let mut r = rng(10);
        let (t, n, d) = (4, 3, 4);
        let heads: Vec<Head> = (0..2).map(|i| Head::random(d, 2, 20 + i)).collect();
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::uniform(&[t, n, d], 1.0, &mut r));
        let spe = tape.leaf(Tensor::uniform(&[n, d], 0.1, &mut r));
        let tpe = tape.leaf(Tensor::uniform(&[t, d], 0.1, &mut r));
        let hv: Vec<HeadVars> = heads.iter().map(|hd| hd.bind(&mut tape)).collect();
        let adj: Vec<Var> = (0..2).map(|_| tape.leaf(Tensor::ones(&[n, n]))).collect();
        let wo = tape.leaf(Tensor::uniform(&[d, 8], 1.0, &mut r));
        let (so, smaps) = spatial_attention(&mut tape, h, spe, &hv, &adj, wo).unwrap();
        let (to, tmaps) = temporal_attention(&mut tape, h, tpe, &hv, wo).unwrap();
        assert_eq!(tape.shape(so), &[t, n, 8]);
        assert_eq!(tape.shape(to), &[t, n, 8]);
        let mut maps = AttentionMaps::default();
        for (m, &v) in smaps.iter().enumerate() {
            maps.record(0, m, MapKind::Spatial, tape.value(v));
        }
        for (m, &v) in tmaps.iter().enumerate() {
            maps.record(0, m, MapKind::Temporal, tape.value(v));
        }
        assert_eq!(maps.maps.len(), 4);
        for m in &maps.maps {
            let l = if m.kind == MapKind::Spatial { n } else { t };
            assert_eq!(m.map.len(), l);
            for row in &m.map {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let json = maps.to_json();
        assert!(json.contains("\"kind\":\"temporal\""));
    }

    #[test]
    fn head_gradients_pass_finite_differences() {
        let mut r = rng(11);
        let h = Tensor::uniform(&[2, 4, 4], 1.0, &mut r);
        let head = Head::random(4, 2, 12);
        let gate = Tensor::uniform(&[4, 4], 1.0, &mut r);
        let proj = Tensor::uniform(&[2, 4, 2], 1.0, &mut r);
        let inputs = vec![h, head.wq, head.wk, head.wv, gate];

        let rep = finite_difference_check_many(
            |t, v| {
                let hv = HeadVars { wq: v[1], wk: v[2], wv: v[3] };
                let (o, _) = ssa_gc_head(t, v[0], v[0], &hv, v[4])?;
                let p = t.leaf(proj.clone());
                let y = t.mul(o, p)?;
                Ok(t.sum(y))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");

        let rep = finite_difference_check_many(
            |t, v| {
                let hv = HeadVars { wq: v[1], wk: v[2], wv: v[3] };
                let (o, _) = tsa_head(t, v[0], v[0], &hv)?;
                let p = t.leaf(proj.clone());
                let y = t.mul(o, p)?;
                Ok(t.sum(y))
            },
            &inputs[..4],
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
    }
}
