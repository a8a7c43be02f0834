//! Dataset files, the synthetic sinusoid generator, and the conversion of
//! raw sequences into fixed-length model inputs.
//!
//! A dataset is JSON Lines, one sample per line:
//! `{"id": "s0", "label": 1, "frames": [[[x, y, z], ...], ...]}` with
//! `frames[t][n][c]`. `id` is optional and defaults to the zero-based line
//! number of the sample.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::modality::{resize_temporal, ModalityConfig, SkeletonSequence};
use crate::tensor::Tensor;

const TEMPLATE_SEED: u64 = 0x7e3a_91c5_2f08_d4b6;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub sequence: SkeletonSequence,
}

#[derive(Serialize, Deserialize)]
struct Line {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    label: usize,
    frames: Vec<Vec<Vec<f64>>>,
}

/// Parses a dataset file. Blank lines are ignored; every sample must share
/// the joint and channel counts of the first.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<Sample> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let raw: Line = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if raw.frames.is_empty() || raw.frames[0].is_empty() || raw.frames[0][0].is_empty() {
            return Err(err("empty frames array".into()));
        }
        let sequence = SkeletonSequence::from_frames(&raw.frames, raw.label).map_err(|e| err(e.to_string()))?;
        if let Some(first) = out.first() {
            let (n, c) = (first.sequence.joints(), first.sequence.channels());
            if sequence.joints() != n || sequence.channels() != c {
                return Err(err(format!(
                    "sample has N={} C={}, earlier samples have N={n} C={c}",
                    sequence.joints(),
                    sequence.channels()
                )));
            }
        }
        let id = raw.id.unwrap_or_else(|| out.len().to_string());
        out.push(Sample { id, sequence });
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(samples: &[Sample], mut w: W) -> Result<()> {
    for s in samples {
        let line = Line {
            id: Some(s.id.clone()),
            label: s.sequence.label(),
            frames: s.sequence.to_frames(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(())
}

pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(samples, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn default_channels() -> usize {
    3
}

/// Parameters of the synthetic generator. Frame counts are drawn uniformly
/// from `min_frames..=max_frames`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub joints: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_classes < 2 {
            return fail("need at least 2 classes");
        }
        if self.samples_per_class == 0 || self.joints == 0 {
            return fail("samples per class and joints must be positive");
        }
        if self.channels < 2 {
            return fail("need at least 2 channels");
        }
        if self.min_frames < 2 || self.max_frames < self.min_frames {
            return fail("frame range must satisfy 2 <= min <= max");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return fail("noise must be finite and non-negative");
        }
        Ok(())
    }
}

/// Per-class trajectory parameters: joint `n`, channel `c` of class `k`
/// follows `rest[n][c] + amp * sin(2π (k + 1) τ + phase)` over normalized
/// time `τ ∈ [0, 1]`.
struct Template {
    rest: Vec<f64>,
    amp: Vec<Vec<f64>>,
    phase: Vec<Vec<f64>>,
}

impl Template {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
        let nc = spec.joints * spec.channels;
        let rest = (0..nc).map(|_| r.gen_range(-1.0..1.0)).collect();
        let amp = (0..spec.num_classes)
            .map(|_| (0..nc).map(|_| r.gen_range(0.3..1.0)).collect())
            .collect();
        let phase = (0..spec.num_classes)
            .map(|_| (0..nc).map(|_| r.gen_range(0.0..2.0 * PI)).collect())
            .collect();
        Self { rest, amp, phase }
    }
}

/// Samples are ordered class by class, ids `s0, s1, ...`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let tpl = Template::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, c) = (spec.joints, spec.channels);
    let mut out = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for class in 0..spec.num_classes {
        let freq = (class + 1) as f64;
        for _ in 0..spec.samples_per_class {
            let t_len = rng.gen_range(spec.min_frames..=spec.max_frames);
            let mut data = Vec::with_capacity(t_len * n * c);
            for t in 0..t_len {
                let tau = t as f64 / (t_len - 1) as f64;
                for j in 0..n * c {
                    let clean = tpl.rest[j] + tpl.amp[class][j] * (2.0 * PI * freq * tau + tpl.phase[class][j]).sin();
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    data.push(clean + spec.noise * eps);
                }
            }
            let sequence = SkeletonSequence::new(Tensor::new(&[t_len, n, c], data)?, class)?;
            out.push(Sample {
                id: format!("s{}", out.len()),
                sequence,
            });
        }
    }
    Ok(out)
}

/// Seeded stratified holdout: within each class, `round(fraction * count)`
/// samples go to the second list. Both lists keep dataset order.
pub fn split_holdout(samples: &[Sample], fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = samples.iter().map(|s| s.sequence.label() + 1).max().unwrap_or(0);
    let mut held = vec![false; samples.len()];
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].sequence.label() == class).collect();
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..k] {
            held[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, h) in samples.iter().zip(held) {
        if h {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, val))
}

/// Model-ready inputs: each sequence resized to `frames`, then transformed
/// into the requested modality.
#[derive(Clone, Debug, Default)]
pub struct PreparedSet {
    pub ids: Vec<String>,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|l| l + 1).max().unwrap_or(0)
    }
}

pub fn prepare(samples: &[Sample], modality: &ModalityConfig, graph: &GraphSpec, frames: usize) -> Result<PreparedSet> {
    let mut set = PreparedSet::default();
    for s in samples {
        if s.sequence.joints() != graph.num_joints() {
            return Err(Error::Data(format!(
                "sample {} has {} joints, graph {} has {}",
                s.id,
                s.sequence.joints(),
                graph.name(),
                graph.num_joints()
            )));
        }
        let resized = resize_temporal(&s.sequence, frames)?;
        let x = modality.apply(&resized, graph)?;
        set.ids.push(s.id.clone());
        set.labels.push(x.label());
        set.inputs.push(x.data().clone());
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::{Modality, ModalityConfig};

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            samples_per_class: 4,
            joints: 5,
            channels: 3,
            min_frames: 20,
            max_frames: 30,
            noise: 0.05,
            seed: 7,
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn one_line_dims() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let frames: Vec<Vec<Vec<f64>>> = (0..4).map(|t| (0..3).map(|n| vec![t as f64, n as f64]).collect()).collect();
        std::fs::write(&p, serde_json::json!({"label": 1, "frames": frames}).to_string()).unwrap();
        let d = load_dataset(&p).unwrap();
        assert_eq!(d.len(), 1);
        let s = &d[0].sequence;
        assert_eq!((s.frames(), s.joints(), s.channels(), s.label()), (4, 3, 2, 1));
        assert_eq!(d[0].id, "0");
    }

    #[test]
    fn round_trip_is_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample {
                id: format!("x{i}"),
                sequence: SkeletonSequence::new(
                    Tensor::new(&[3, 2, 2], (0..12).map(|_| r.gen::<f64>() * 1e3 - 500.0 + 1e-17).collect()).unwrap(),
                    i % 2,
                )
                .unwrap(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&samples, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back, samples);
        for (a, b) in back.iter().zip(&samples) {
            for (x, y) in a.sequence.data().data().iter().zip(b.sequence.data().data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let good = r#"{"label": 0, "frames": [[[1, 2]], [[3, 4]]]}"#;
        std::fs::write(&p, format!("{good}\n{good}\n{{\"label\": oops}}\n")).unwrap();
        let e = load_dataset(&p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");

        std::fs::write(&p, format!("{good}\n{}\n", r#"{"label": 0, "frames": [[[1, 2], [3, 4]], [[1, 2], [3, 4]]]}"#)).unwrap();
        let e = load_dataset(&p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");

        std::fs::write(&p, format!("{good}\n{}\n", r#"{"label": 0, "frames": [[[1, 2, 3]], [[3, 4, 5]]]}"#)).unwrap();
        assert!(matches!(load_dataset(&p).unwrap_err(), Error::Parse { line: 2, .. }));

        std::fs::write(&p, r#"{"label": 0, "frames": [[[1, 2]], [[3]]]}"#).unwrap();
        assert!(matches!(load_dataset(&p).unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(generate_synthetic(&spec()).unwrap(), generate_synthetic(&spec()).unwrap());
    }

    #[test]
    fn noiseless_same_class_samples_are_identical() {
        let s = SyntheticSpec {
            noise: 0.0,
            min_frames: 16,
            max_frames: 16,
            ..spec()
        };
        let d = generate_synthetic(&s).unwrap();
        assert_eq!(d[0].sequence, d[1].sequence);
        assert_ne!(d[0].sequence, d[4].sequence);
    }

    #[test]
    fn seeds_change_noise_not_templates() {
        let a = SyntheticSpec { min_frames: 16, max_frames: 16, ..spec() };
        let b = SyntheticSpec { seed: 8, ..a.clone() };
        let clean = SyntheticSpec { noise: 0.0, ..a.clone() };
        let (da, db, dc) = (
            generate_synthetic(&a).unwrap(),
            generate_synthetic(&b).unwrap(),
            generate_synthetic(&clean).unwrap(),
        );
        assert_ne!(da, db);
        for i in 0..da.len() {
            let ra = da[i].sequence.data().max_abs_diff(dc[i].sequence.data());
            let rb = db[i].sequence.data().max_abs_diff(dc[i].sequence.data());
            assert!(ra < 0.05 * 6.0 && rb < 0.05 * 6.0);
        }
    }

    #[test]
    fn synthetic_shapes_and_labels() {
        let d = generate_synthetic(&spec()).unwrap();
        assert_eq!(d.len(), 12);
        for (i, s) in d.iter().enumerate() {
            assert_eq!(s.sequence.label(), i / 4);
            assert!((20..=30).contains(&s.sequence.frames()));
            assert_eq!((s.sequence.joints(), s.sequence.channels()), (5, 3));
        }
        assert!(generate_synthetic(&SyntheticSpec { num_classes: 1, ..spec() }).is_err());
    }

    /// Multinomial logistic regression on pooled `[mean X, mean |motion|]`
    /// features of the 64-frame resampled sequences, trained by full-batch gradient descent on the tape.
    #[test]
    fn gap_features_are_linearly_separable() {
        let s = SyntheticSpec {
            num_classes: 2,
            samples_per_class: 40,
            joints: 10,
            noise: 0.1,
            min_frames: 40,
            max_frames: 64,
            ..spec()
        };
        let d = generate_synthetic(&s).unwrap();
        let (train, test) = split_holdout(&d, 0.5, 1).unwrap();
        let feats = |set: &[Sample]| -> (Tensor, Vec<usize>) {
            let mut rows = Vec::new();
            for x in set {
                let x = resize_temporal(&x.sequence, 64).unwrap();
                let m = crate::modality::motion_diff(&x).unwrap();
                let (t, n, c) = (x.frames(), x.joints(), x.channels());
                let mut f = vec![0.0; 2 * c];
                for (i, (&v, &dv)) in x.data().data().iter().zip(m.data().data()).enumerate() {
                    f[i % c] += v / (t * n) as f64;
                    f[c + i % c] += dv.abs() / ((t - 1) * n) as f64;
                }
                rows.push(f);
            }
            (Tensor::from_rows(&rows).unwrap(), set.iter().map(|x| x.sequence.label()).collect())
        };
        let (xtr, ytr) = feats(&train);
        let (xte, yte) = feats(&test);
        let standardize = |x: &Tensor| -> Tensor {
            let rows = xtr.to_rows();
            let mut out = x.to_rows();
            for j in 0..6 {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / rows.len() as f64;
                out.iter_mut().for_each(|r| r[j] = (r[j] - mean) / var.sqrt());
            }
            Tensor::from_rows(&out).unwrap()
        };
        let (xtr, xte) = (standardize(&xtr), standardize(&xte));
        let mut w = Tensor::zeros(&[6, 2]);
        let mut b = Tensor::zeros(&[2]);
        for _ in 0..500 {
            let mut tape = crate::tensor::Tape::new();
            let x = tape.leaf(xtr.clone());
            let (wv, bv) = (tape.param(w.clone()), tape.param(b.clone()));
            let z = tape.matmul(x, wv).unwrap();
            let z = tape.add(z, bv).unwrap();
            let loss = tape.cross_entropy(z, &ytr).unwrap();
            let g = tape.backward(loss).unwrap();
            for (p, v) in [(&mut w, wv), (&mut b, bv)] {
                let gv = g.get(v).unwrap().to_vec();
                p.data_mut().iter_mut().zip(gv).for_each(|(p, g)| *p -= 0.5 * g);
            }
        }
        let correct = (0..yte.len())
            .filter(|&i| {
                let s: Vec<f64> = (0..2)
                    .map(|k| (0..6).map(|j| xte.get(&[i, j]) * w.get(&[j, k])).sum::<f64>() + b.data()[k])
                    .collect();
                (s[1] > s[0]) as usize == yte[i]
            })
            .count();
        assert!(correct as f64 / yte.len() as f64 > 0.9, "{correct}/{}", yte.len());
    }

    #[test]
    fn holdout_is_stratified_and_seeded() {
        let d = generate_synthetic(&spec()).unwrap();
        let (tr, va) = split_holdout(&d, 0.25, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (9, 3));
        for c in 0..3 {
            assert_eq!(va.iter().filter(|s| s.sequence.label() == c).count(), 1);
        }
        let (tr2, _) = split_holdout(&d, 0.25, 3).unwrap();
        assert_eq!(tr, tr2);
        assert!(split_holdout(&d, 1.0, 3).is_err());
    }

    #[test]
    fn prepare_resizes_then_transforms() {
        let d = generate_synthetic(&spec()).unwrap();
        let g = GraphSpec::build("chain5", &[-1, 0, 1, 2, 3]).unwrap();
        let m = ModalityConfig::from_modality(Modality::BoneMotion, None, &g).unwrap();
        let set = prepare(&d, &m, &g, 16).unwrap();
        assert_eq!(set.len(), 12);
        assert_eq!(set.num_classes(), 3);
        assert_eq!(set.inputs[0].shape(), &[16, 5, 3]);
        let last = &set.inputs[0].data()[15 * 15..];
        assert!(last.iter().all(|&v| v == 0.0));
        let g3 = GraphSpec::build("chain3", &[-1, 0, 1]).unwrap();
        assert!(prepare(&d, &ModalityConfig::from_modality(Modality::Joint, None, &g3).unwrap(), &g3, 16).is_err());
    }
}
