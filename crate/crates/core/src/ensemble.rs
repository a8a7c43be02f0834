//! Per-stream softmax score files and their equal-weight fusion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tags of the four-stream ensemble.
pub const FOUR_STREAM: [&str; 4] = ["J", "B", "JM", "BM"];
/// Tags of the six-stream ensemble.
pub const SIX_STREAM: [&str; 6] = ["J", "B", "JM", "BM", "J2", "B2M"];

const ROW_TOL: f64 = 1e-6;

/// Softmax scores of one modality stream, one row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamScoreFile {
    pub tag: String,
    pub ids: Vec<String>,
    pub classes: usize,
    pub scores: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

impl StreamScoreFile {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.ids.len() {
            return Err(Error::Data(format!(
                "stream {}: {} score rows for {} ids",
                self.tag,
                self.scores.len(),
                self.ids.len()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.ids.len() {
                return Err(Error::Data(format!("stream {}: {} labels for {} ids", self.tag, l.len(), self.ids.len())));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= self.classes) {
                return Err(Error::Label {
                    label: bad,
                    classes: self.classes,
                });
            }
        }
        for (id, row) in self.ids.iter().zip(&self.scores) {
            if row.len() != self.classes {
                return Err(Error::Data(format!(
                    "stream {}: sample {id} has {} scores for {} classes",
                    self.tag,
                    row.len(),
                    self.classes
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOL || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!(
                    "stream {}: scores of sample {id} are not a probability vector (sum {s})",
                    self.tag
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        f.validate().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A score file together with where it came from, for diagnostics.
#[derive(Clone, Debug)]
pub struct NamedScores {
    pub source: String,
    pub file: StreamScoreFile,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    /// Streams in the order they were summed.
    pub tags: Vec<String>,
    pub fused: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    /// Present when any input carries labels.
    pub accuracy: Option<f64>,
}

/// Sums score matrices in sorted-tag order (ties broken by source) and
/// predicts the argmax of each fused row.
pub fn ensemble(streams: &[NamedScores]) -> Result<EnsembleResult> {
    let mut order: Vec<&NamedScores> = streams.iter().collect();
    order.sort_by(|a, b| (&a.file.tag, &a.source).cmp(&(&b.file.tag, &b.source)));
    let first = *order.first().ok_or_else(|| Error::Data("no score files to ensemble".into()))?;
    let mut labels: Option<(&str, &Vec<usize>)> = None;
    for s in &order {
        s.file
            .validate()
            .map_err(|e| Error::Data(format!("{}: {e}", s.source)))?;
        if s.file.ids != first.file.ids {
            let at = s
                .file
                .ids
                .iter()
                .zip(&first.file.ids)
                .position(|(a, b)| a != b)
                .unwrap_or(s.file.ids.len().min(first.file.ids.len()));
            return Err(Error::Data(format!(
                "sample ids of {} and {} differ (first mismatch at row {at})",
                first.source, s.source
            )));
        }
        if s.file.classes != first.file.classes {
            return Err(Error::Data(format!(
                "{} has {} classes but {} has {}",
                first.source, first.file.classes, s.source, s.file.classes
            )));
        }
        if let Some(l) = &s.file.labels {
            match labels {
                Some((src, prev)) if prev != l => {
                    return Err(Error::Data(format!("labels of {src} and {} differ", s.source)));
                }
                None => labels = Some((&s.source, l)),
                _ => {}
            }
        }
    }
    let (n, k) = (first.file.ids.len(), first.file.classes);
    let mut fused = vec![vec![0.0; k]; n];
    for s in &order {
        for (acc, row) in fused.iter_mut().zip(&s.file.scores) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    let predictions: Vec<usize> = fused.iter().map(|r| argmax(r)).collect();
    let accuracy = labels.map(|(_, l)| {
        if n == 0 {
            0.0
        } else {
            predictions.iter().zip(l).filter(|(p, y)| p == y).count() as f64 / n as f64
        }
    });
    Ok(EnsembleResult {
        tags: order.iter().map(|s| s.file.tag.clone()).collect(),
        fused,
        predictions,
        accuracy,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Checks that `tags` is exactly the four- or six-stream set.
pub fn check_stream_set(tags: &[String], streams: usize) -> Result<()> {
    let expected: &[&str] = match streams {
        4 => &FOUR_STREAM,
        6 => &SIX_STREAM,
        other => return Err(Error::Config(format!("no {other}-stream ensemble is defined"))),
    };
    let mut got: Vec<&str> = tags.iter().map(String::as_str).collect();
    let mut want = expected.to_vec();
    got.sort_unstable();
    want.sort_unstable();
    if got != want {
        return Err(Error::Config(format!(
            "{streams}-stream ensemble needs streams {want:?}, got {got:?}"
        )));
    }
    Ok(())
}
