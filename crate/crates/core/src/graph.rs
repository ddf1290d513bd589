//! Graph samples, datasets, the on-disk JSON format and splitting.
//!
//! File layout:
//!
//! ```json
//! {"manifest": {"name": "toy", "task_type": "classification", "num_tasks": 2,
//!               "d_input": 3, "d_edge": 0, "metric": "roc_auc"},
//!  "samples": [{"nodes": [[1,0,0],[0,1,0]], "edges": [[0,1]], "edge_feats": [],
//!               "label": [1,0], "mask": [true,false]}]}
//! ```
//!
//! Undirected edges are stored once; models expand them to both
//! directions.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RocAuc,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub task_type: TaskType,
    pub num_tasks: usize,
    pub d_input: usize,
    pub d_edge: usize,
    pub metric: Metric,
    #[serde(skip)]
    pub num_samples: usize,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        match (self.task_type, self.metric) {
            (TaskType::Classification, Metric::RocAuc) | (TaskType::Regression, Metric::Mae) => {}
            (t, m) => {
                return Err(Error::Validation(format!(
                    "task type {t:?} is inconsistent with metric {m:?}"
                )))
            }
        }
        if self.num_tasks == 0 {
            return Err(Error::Validation("manifest declares zero tasks".into()));
        }
        if self.d_input == 0 {
            return Err(Error::Validation(
                "manifest declares zero input features".into(),
            ));
        }
        Ok(())
    }
}

/// One graph with node features and a multi-task label.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub node_features: Matrix,
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Matrix,
    pub label: Vec<f64>,
    pub label_mask: Vec<bool>,
}

impl GraphSample {
    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Neighbour lists with each stored edge expanded in both directions,
    /// each list sorted ascending.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(s, d) in &self.edges {
            adj[s].push(d);
            adj[d].push(s);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn has_any_label(&self) -> bool {
        self.label_mask.iter().any(|m| *m)
    }

    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let n = self.num_nodes();
        if n == 0 {
            return Err(Error::Validation("graph has no nodes".into()));
        }
        if self.node_features.cols() != manifest.d_input {
            return Err(Error::Validation(format!(
                "node feature width {} != d_input {}",
                self.node_features.cols(),
                manifest.d_input
            )));
        }
        if !self.node_features.is_finite() || !self.edge_features.is_finite() {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, &(s, d)) in self.edges.iter().enumerate() {
            if s >= n || d >= n {
                return Err(Error::Validation(format!(
                    "edge {i} ({s},{d}) references a node outside 0..{n}"
                )));
            }
            if s == d {
                return Err(Error::Validation(format!(
                    "edge {i} is a self-loop on node {s}"
                )));
            }
            if !seen.insert((s.min(d), s.max(d))) {
                return Err(Error::Validation(format!(
                    "edge {i} ({s},{d}) is a duplicate"
                )));
            }
        }
        // zero rows: edge features absent (they are never consumed)
        let e = self.edge_features.rows();
        if e != 0 && (e != self.edges.len() || self.edge_features.cols() != manifest.d_edge) {
            return Err(Error::Validation(format!(
                "edge features are {}x{}, expected {}x{}",
                e,
                self.edge_features.cols(),
                self.edges.len(),
                manifest.d_edge
            )));
        }
        if self.label.len() != manifest.num_tasks {
            return Err(Error::Validation(format!(
                "label has length {} but the manifest declares {} tasks",
                self.label.len(),
                manifest.num_tasks
            )));
        }
        if self.label_mask.len() != self.label.len() {
            return Err(Error::Validation(format!(
                "mask length {} != label length {}",
                self.label_mask.len(),
                self.label.len()
            )));
        }
        for (t, (&y, &m)) in self.label.iter().zip(&self.label_mask).enumerate() {
            if !y.is_finite() {
                return Err(Error::Validation(format!("label {t} is not finite")));
            }
            if m && manifest.task_type == TaskType::Classification && y != 0.0 && y != 1.0 {
                return Err(Error::Validation(format!(
                    "classification label {t} is {y}, expected 0 or 1"
                )));
            }
        }
        Ok(())
    }
}

/// A validated dataset in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<GraphSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    nodes: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    #[serde(default)]
    edge_feats: Vec<Vec<f64>>,
    label: Vec<f64>,
    mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    manifest: DatasetManifest,
    samples: Vec<RawSample>,
}

fn rows_to_matrix(rows: &[Vec<f64>], width: usize) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, width));
    }
    Matrix::from_rows(rows).map_err(|e| Error::Validation(e.to_string()))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Parses and validates the JSON dataset format.
    pub fn from_json(text: &str) -> Result<Dataset> {
        let raw: RawDataset = serde_json::from_str(text)?;
        let mut manifest = raw.manifest;
        manifest.validate()?;
        let mut samples = Vec::with_capacity(raw.samples.len());
        for (i, s) in raw.samples.into_iter().enumerate() {
            let wrap = |e: Error| Error::Validation(format!("sample {i}: {e}"));
            let node_features = rows_to_matrix(&s.nodes, manifest.d_input).map_err(wrap)?;
            let edge_features = if s.edge_feats.is_empty() {
                Matrix::zeros(0, manifest.d_edge)
            } else {
                rows_to_matrix(&s.edge_feats, manifest.d_edge).map_err(wrap)?
            };
            let sample = GraphSample {
                node_features,
                edges: s.edges.iter().map(|e| (e[0], e[1])).collect(),
                edge_features,
                label: s.label,
                label_mask: s.mask,
            };
            sample.validate(&manifest).map_err(wrap)?;
            samples.push(sample);
        }
        manifest.num_samples = samples.len();
        Ok(Dataset { manifest, samples })
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RawDataset {
            manifest: self.manifest.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| RawSample {
                    nodes: s.node_features.to_rows(),
                    edges: s.edges.iter().map(|&(a, b)| [a, b]).collect(),
                    edge_feats: s.edge_features.to_rows(),
                    label: s.label.clone(),
                    mask: s.label_mask.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&raw)?)
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Dataset::from_json(&text)
}

/// Uniform random split into `(train, test)`, deterministic in `seed`.
pub fn train_test_split(
    samples: &[GraphSample],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<GraphSample>, Vec<GraphSample>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "cannot split {n} samples into train and test"
        )));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::GLOBAL, 0, Purpose::Split));
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut test_idx = test_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| samples[i].clone()).collect(),
        test_idx.iter().map(|&i| samples[i].clone()).collect(),
    ))
}

/// Per-task standardization fitted on training labels only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(samples: &[GraphSample], num_tasks: usize) -> Standardizer {
        let mut mean = vec![0.0; num_tasks];
        let mut std = vec![1.0; num_tasks];
        for t in 0..num_tasks {
            let vals: Vec<f64> = samples
                .iter()
                .filter(|s| s.label_mask[t])
                .map(|s| s.label[t])
                .collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            mean[t] = m;
            std[t] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, samples: &[GraphSample]) -> Vec<GraphSample> {
        samples
            .iter()
            .map(|s| {
                let mut out = s.clone();
                for t in 0..out.label.len() {
                    if out.label_mask[t] {
                        out.label[t] = (out.label[t] - self.mean[t]) / self.std[t];
                    }
                }
                out
            })
            .collect()
    }

    pub fn invert(&self, task: usize, value: f64) -> f64 {
        value * self.std[task] + self.mean[task]
    }
}
