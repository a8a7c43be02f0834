//! Input modalities derived from raw joint coordinates: generalized bones,
//! temporal motion, and fixed-length temporal resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{matrix_power, GraphSpec};
use crate::tensor::Tensor;

/// One labeled `T x N x C` coordinate sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    data: Tensor,
    label: usize,
}

impl SkeletonSequence {
    pub fn new(data: Tensor, label: usize) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Shape(format!(
                "skeleton sequence must be T x N x C, got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data, label })
    }

    /// Builds from `frames[t][n][c]`.
    pub fn from_frames(frames: &[Vec<Vec<f64>>], label: usize) -> Result<Self> {
        let t = frames.len();
        let n = frames.first().map_or(0, Vec::len);
        let c = frames.first().and_then(|f| f.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(t * n * c);
        for (ti, frame) in frames.iter().enumerate() {
            if frame.len() != n {
                return Err(Error::Shape(format!(
                    "frame {ti} has {} joints, expected {n}",
                    frame.len()
                )));
            }
            for (ni, joint) in frame.iter().enumerate() {
                if joint.len() != c {
                    return Err(Error::Shape(format!(
                        "frame {ti} joint {ni} has {} channels, expected {c}",
                        joint.len()
                    )));
                }
                data.extend_from_slice(joint);
            }
        }
        Self::new(Tensor::new(&[t, n, c], data)?, label)
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn to_frames(&self) -> Vec<Vec<Vec<f64>>> {
        let (n, c) = (self.joints(), self.channels());
        self.data
            .data()
            .chunks(n * c)
            .map(|f| f.chunks(c).map(<[f64]>::to_vec).collect())
            .collect()
    }

    fn with_data(&self, data: Vec<f64>, frames: usize) -> Self {
        let shape = [frames, self.joints(), self.channels()];
        Self {
            data: Tensor::new(&shape, data).expect("shape preserved"),
            label: self.label,
        }
    }
}

/// Position or temporal-difference input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Position,
    Motion,
}

/// The four named stream inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Modality {
    pub fn kind(self) -> ModalityKind {
        match self {
            Modality::Joint | Modality::Bone => ModalityKind::Position,
            Modality::JointMotion | Modality::BoneMotion => ModalityKind::Motion,
        }
    }
}

/// Which transform of the raw coordinates a stream trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub kind: ModalityKind,
    /// Ancestor distance `k` of the generalized bone; `k == K` is the joint itself.
    pub bone_power: usize,
    /// Nilpotency index `K` of the graph's source-target matrix.
    pub nilpotency: usize,
}

impl ModalityConfig {
    pub fn new(kind: ModalityKind, bone_power: usize, graph: &GraphSpec) -> Result<Self> {
        let nilpotency = graph.nilpotency_index();
        if bone_power == 0 || bone_power > nilpotency {
            return Err(Error::Config(format!(
                "bone power {bone_power} outside [1, {nilpotency}] for graph {}",
                graph.name()
            )));
        }
        Ok(Self {
            kind,
            bone_power,
            nilpotency,
        })
    }

    /// Joint modalities ignore `k`; bone modalities default to `k = 1`.
    pub fn from_modality(m: Modality, k: Option<usize>, graph: &GraphSpec) -> Result<Self> {
        let power = match m {
            Modality::Joint | Modality::JointMotion => graph.nilpotency_index(),
            Modality::Bone | Modality::BoneMotion => k.unwrap_or(1),
        };
        Self::new(m.kind(), power, graph)
    }

    pub fn is_joint(&self) -> bool {
        self.bone_power == self.nilpotency
    }

    /// Stream tag used in score files: `J`, `B`, `JM`, `BM`, and `J{k}` /
    /// `B{k}M` for other bone powers.
    pub fn tag(&self) -> String {
        let motion = self.kind == ModalityKind::Motion;
        match (self.is_joint(), self.bone_power, motion) {
            (true, _, false) => "J".into(),
            (true, _, true) => "JM".into(),
            (false, 1, false) => "B".into(),
            (false, 1, true) => "BM".into(),
            (false, k, false) => format!("J{k}"),
            (false, k, true) => format!("B{k}M"),
        }
    }

    /// Bone transform first, then temporal difference for motion kinds.
    pub fn apply(&self, x: &SkeletonSequence, graph: &GraphSpec) -> Result<SkeletonSequence> {
        let bone = generalized_bone(x, self.bone_power, graph)?;
        match self.kind {
            ModalityKind::Position => Ok(bone),
            ModalityKind::Motion => motion_diff(&bone),
        }
    }
}

/// Subtracts each joint's `k`-th ancestor, per frame: `X_j - X_{parent^k(j)}`.
/// Joints with fewer than `k` ancestors are unchanged, so `k = K` is the
/// identity.
pub fn generalized_bone(x: &SkeletonSequence, k: usize, graph: &GraphSpec) -> Result<SkeletonSequence> {
    let big_k = graph.nilpotency_index();
    if k == 0 || k > big_k {
        return Err(Error::Config(format!("bone power {k} outside [1, {big_k}]")));
    }
    let n = graph.num_joints();
    if x.joints() != n {
        return Err(Error::Shape(format!(
            "sequence has {} joints, graph {} has {n}",
            x.joints(),
            graph.name()
        )));
    }
    // Column j of P^k marks the k-th ancestor of j.
    let pk = matrix_power(&graph.source_target(), k as i64)?;
    let ancestor: Vec<Option<usize>> = (0..n)
        .map(|j| (0..n).find(|&i| pk.get(&[i, j]) != 0.0))
        .collect();
    let c = x.channels();
    let src = x.data().data();
    let mut out = src.to_vec();
    for t in 0..x.frames() {
        let frame = t * n * c;
        for (j, anc) in ancestor.iter().enumerate() {
            if let Some(a) = *anc {
                for ch in 0..c {
                    out[frame + j * c + ch] = src[frame + j * c + ch] - src[frame + a * c + ch];
                }
            }
        }
    }
    Ok(x.with_data(out, x.frames()))
}

/// Forward difference along time, final frame zero.
pub fn motion_diff(x: &SkeletonSequence) -> Result<SkeletonSequence> {
    let t = x.frames();
    if t < 2 {
        return Err(Error::Shape(format!("motion needs at least 2 frames, got {t}")));
    }
    let stride = x.joints() * x.channels();
    let src = x.data().data();
    let mut out = vec![0.0; src.len()];
    for i in 0..(t - 1) * stride {
        out[i] = src[i + stride] - src[i];
    }
    Ok(x.with_data(out, t))
}

/// Linear interpolation onto `target` uniformly spaced points spanning the
/// original time range; endpoints are kept exactly.
pub fn resize_temporal(x: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    let t = x.frames();
    if t < 2 {
        return Err(Error::Shape(format!("resize needs at least 2 frames, got {t}")));
    }
    if target < 2 {
        return Err(Error::Config(format!("resize target must be >= 2, got {target}")));
    }
    if t == target {
        return Ok(x.clone());
    }
    let stride = x.joints() * x.channels();
    let src = x.data().data();
    let mut out = Vec::with_capacity(target * stride);
    for i in 0..target {
        let pos = (i * (t - 1)) as f64 / (target - 1) as f64;
        let lo = (pos.floor() as usize).min(t - 1);
        let frac = pos - lo as f64;
        if frac == 0.0 {
            out.extend_from_slice(&src[lo * stride..(lo + 1) * stride]);
            continue;
        }
        let (a, b) = (&src[lo * stride..(lo + 1) * stride], &src[(lo + 1) * stride..(lo + 2) * stride]);
        out.extend(a.iter().zip(b).map(|(&a, &b)| (a + frac * (b - a)).clamp(a.min(b), a.max(b))));
    }
    Ok(x.with_data(out, target))
}
