//! Skeleton graphs: physical adjacency, its normalized form, and the directed
//! source-target relation used to derive bone modalities.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A skeleton tree described by each joint's parent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSpec {
    name: String,
    parents: Vec<Option<usize>>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    name: String,
    parents: Vec<i64>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("hand22", include_str!("../graphs/hand22.json")),
    ("body25", include_str!("../graphs/body25.json")),
    ("body20", include_str!("../graphs/body20.json")),
    ("stick10", include_str!("../graphs/stick10.json")),
];

impl GraphSpec {
    /// Validates a parent array (`-1` marks the root) and builds the graph.
    pub fn build(name: impl Into<String>, parents: &[i64]) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(Error::Graph("graph has no joints".into()));
        }
        let mut out = Vec::with_capacity(n);
        for (j, &p) in parents.iter().enumerate() {
            match p {
                -1 => out.push(None),
                p if p >= 0 && (p as usize) < n => {
                    if p as usize == j {
                        return Err(Error::Graph(format!("joint {j} is its own parent")));
                    }
                    out.push(Some(p as usize));
                }
                p => {
                    return Err(Error::Graph(format!(
                        "parent {p} of joint {j} out of range for {n} joints"
                    )))
                }
            }
        }
        let roots = out.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::Graph(format!("expected exactly one root, found {roots}")));
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = out[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Graph(format!("cycle through joint {start}")));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            parents: out,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GraphFile = serde_json::from_str(text)?;
        Self::build(f.name, &f.parents)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphFile {
            name: self.name.clone(),
            parents: self.parents_i64(),
        })
        .expect("graph serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// One of the graphs shipped with the crate: `hand22`, `body25`,
    /// `body20` or `stick10`.
    pub fn bundled(name: &str) -> Result<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text))
            .unwrap_or_else(|| Err(Error::Graph(format!("no bundled graph named {name:?}"))))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    /// A bundled graph name or a path to a graph file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if BUNDLED.iter().any(|(n, _)| *n == spec) {
            Self::bundled(spec)
        } else {
            Self::load(Path::new(spec))
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn parents_i64(&self) -> Vec<i64> {
        self.parents
            .iter()
            .map(|p| p.map_or(-1, |p| p as i64))
            .collect()
    }

    pub fn root(&self) -> usize {
        self.parents.iter().position(Option::is_none).unwrap()
    }

    /// Undirected bones as `(parent, child)` pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (p, j)))
            .collect()
    }

    /// Symmetric binary adjacency `A`, zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        let n = self.num_joints();
        let mut a = Tensor::zeros(&[n, n]);
        for (p, c) in self.edges() {
            a.set(&[p, c], 1.0);
            a.set(&[c, p], 1.0);
        }
        a
    }

    /// Source-target matrix: `P[i][j] = 1` iff joint `i` is the parent of `j`.
    pub fn source_target(&self) -> Tensor {
        let n = self.num_joints();
        let mut p = Tensor::zeros(&[n, n]);
        for (parent, child) in self.edges() {
            p.set(&[parent, child], 1.0);
        }
        p
    }

    /// Smallest `K` with `P^K = 0`: the number of joints on the longest
    /// root-to-leaf path.
    pub fn nilpotency_index(&self) -> usize {
        (0..self.num_joints())
            .map(|j| {
                let mut depth = 1;
                let mut cur = j;
                while let Some(p) = self.parents[cur] {
                    cur = p;
                    depth += 1;
                }
                depth
            })
            .max()
            .unwrap()
    }

    pub fn normalized_adjacency(&self) -> Tensor {
        normalize_adjacency(&self.adjacency())
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut with_loops = a.clone();
    for i in 0..n {
        with_loops.set(&[i, i], a.get(&[i, i]) + 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = (0..n).map(|j| with_loops.get(&[i, j])).sum();
            1.0 / deg.sqrt()
        })
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(&[i, j], inv_sqrt[i] * with_loops.get(&[i, j]) * inv_sqrt[j]);
        }
    }
    out
}

/// Exact integer power of a binary matrix, returned as floats.
pub fn matrix_power(p: &Tensor, k: i64) -> Result<Tensor> {
    if k < 0 {
        return Err(Error::Config(format!("matrix power exponent {k} is negative")));
    }
    let n = p.shape()[0];
    if p.shape() != [n, n] {
        return Err(Error::Shape(format!("matrix power of non-square {:?}", p.shape())));
    }
    let base: Vec<i128> = p
        .data()
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 {
                Err(Error::Config(format!("matrix power needs integer entries, got {v}")))
            } else {
                Ok(v as i128)
            }
        })
        .collect::<Result<_>>()?;
    let mut acc: Vec<i128> = (0..n * n).map(|i| i128::from(i / n == i % n)).collect();
    for _ in 0..k {
        let mut next = vec![0i128; n * n];
        for i in 0..n {
            for l in 0..n {
                let a = acc[i * n + l];
                if a == 0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += a * base[l * n + j];
                }
            }
        }
        acc = next;
        if acc.iter().all(|&v| v == 0) {
            break;
        }
    }
    Tensor::new(&[n, n], acc.into_iter().map(|v| v as f64).collect())
}
