//! Seeded synthetic graph datasets with correlated tasks.
//!
//! Nodes carry one-hot types. A graph's signal is the mean over nodes of
//! `x_v + mean_{u∈N(v)} x_u`, and task `t` scores it against
//! `w_t = c + ρ·r_t` with a shared direction `c`. Classification labels
//! threshold each task at its median score.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Dataset, DatasetManifest, GraphSample, Metric, TaskType};
use crate::rng::{self, Purpose};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_graphs: usize,
    pub num_tasks: usize,
    pub d_input: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Extra edge probability on top of a random spanning tree.
    pub edge_prob: f64,
    /// Task-specific share `ρ` of each task direction.
    pub task_spread: f64,
    /// Std of Gaussian noise added to scores before thresholding.
    pub label_noise: f64,
    /// Probability that a label is missing.
    pub missing_rate: f64,
    pub task_type: TaskType,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_graphs: 200,
            num_tasks: 4,
            d_input: 8,
            min_nodes: 4,
            max_nodes: 12,
            edge_prob: 0.15,
            task_spread: 0.5,
            label_noise: 0.0,
            missing_rate: 0.0,
            task_type: TaskType::Classification,
            seed: 0,
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_graph(
    n: usize,
    d: usize,
    edge_prob: f64,
    rng: &mut impl Rng,
) -> (Matrix, Vec<(usize, usize)>) {
    let mut x = Matrix::zeros(n, d);
    for v in 0..n {
        x.set(v, rng.random_range(0..d), 1.0);
    }
    let mut edges = Vec::new();
    let mut linked = vec![vec![false; n]; n];
    for v in 1..n {
        let u = rng.random_range(0..v);
        edges.push((u, v));
        linked[u][v] = true;
    }
    for u in 0..n {
        for v in u + 1..n {
            if !linked[u][v] && rng.random::<f64>() < edge_prob {
                edges.push((u, v));
                linked[u][v] = true;
            }
        }
    }
    (x, edges)
}

fn signal(x: &Matrix, edges: &[(usize, usize)]) -> Vec<f64> {
    let n = x.rows();
    let d = x.cols();
    let mut nb = vec![Vec::new(); n];
    for &(a, b) in edges {
        nb[a].push(b);
        nb[b].push(a);
    }
    let mut s = vec![0.0; d];
    for v in 0..n {
        for k in 0..d {
            let mut agg = 0.0;
            for &u in &nb[v] {
                agg += x.get(u, k);
            }
            if !nb[v].is_empty() {
                agg /= nb[v].len() as f64;
            }
            s[k] += (x.get(v, k) + agg) / n as f64;
        }
    }
    s
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_graphs == 0 || cfg.num_tasks == 0 || cfg.d_input == 0 {
        return Err(Error::Config(
            "synthetic dataset needs graphs, tasks and features".into(),
        ));
    }
    if cfg.min_nodes == 0 || cfg.min_nodes > cfg.max_nodes {
        return Err(Error::Config(format!(
            "bad node range {}..={}",
            cfg.min_nodes, cfg.max_nodes
        )));
    }
    let mut r = rng::stream(cfg.seed, rng::GLOBAL, 0, Purpose::Synthetic);
    let common: Vec<f64> = (0..cfg.d_input).map(|_| normal(&mut r)).collect();
    let dirs: Vec<Vec<f64>> = (0..cfg.num_tasks)
        .map(|_| {
            common
                .iter()
                .map(|c| c + cfg.task_spread * normal(&mut r))
                .collect()
        })
        .collect();
    let mut graphs = Vec::with_capacity(cfg.num_graphs);
    let mut scores = vec![Vec::with_capacity(cfg.num_graphs); cfg.num_tasks];
    for _ in 0..cfg.num_graphs {
        let n = r.random_range(cfg.min_nodes..=cfg.max_nodes);
        let (x, edges) = random_graph(n, cfg.d_input, cfg.edge_prob, &mut r);
        let s = signal(&x, &edges);
        for (t, w) in dirs.iter().enumerate() {
            let v: f64 = s.iter().zip(w).map(|(a, b)| a * b).sum();
            scores[t].push(v + cfg.label_noise * normal(&mut r));
        }
        graphs.push((x, edges));
    }
    let cut: Vec<f64> = scores
        .iter()
        .map(|col| {
            let mut c = col.clone();
            c.sort_by(f64::total_cmp);
            c[c.len() / 2]
        })
        .collect();
    let mut samples = Vec::with_capacity(cfg.num_graphs);
    for (i, (x, edges)) in graphs.into_iter().enumerate() {
        let label: Vec<f64> = (0..cfg.num_tasks)
            .map(|t| match cfg.task_type {
                TaskType::Classification => f64::from(u8::from(scores[t][i] >= cut[t])),
                TaskType::Regression => scores[t][i],
            })
            .collect();
        let label_mask = (0..cfg.num_tasks)
            .map(|_| r.random::<f64>() >= cfg.missing_rate)
            .collect();
        samples.push(GraphSample {
            node_features: x,
            edge_features: Matrix::zeros(0, 0),
            edges,
            label,
            label_mask,
        });
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", cfg.seed),
        task_type: cfg.task_type,
        num_tasks: cfg.num_tasks,
        d_input: cfg.d_input,
        d_edge: 0,
        metric: match cfg.task_type {
            TaskType::Classification => Metric::RocAuc,
            TaskType::Regression => Metric::Mae,
        },
        num_samples: samples.len(),
    };
    let ds = Dataset { manifest, samples };
    for (i, s) in ds.samples.iter().enumerate() {
        s.validate(&ds.manifest)
            .map_err(|e| Error::Invariant(format!("synthetic sample {i}: {e}")))?;
    }
    Ok(ds)
}
