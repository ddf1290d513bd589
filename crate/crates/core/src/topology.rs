//! Client connection graphs, their mixing matrices and spectral gap.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{sym_eig, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Complete,
    Ring,
    Random,
    /// No links besides self-loops.
    Isolated,
}

impl std::str::FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(TopologyKind::Complete),
            "ring" => Ok(TopologyKind::Ring),
            "random" => Ok(TopologyKind::Random),
            "isolated" => Ok(TopologyKind::Isolated),
            other => Err(Error::Config(format!(
                "unknown topology '{other}' (expected complete, ring, random or isolated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySpec {
    pub kind: TopologyKind,
    pub n_neighbors: usize,
    pub seed: u64,
}

impl Default for TopologySpec {
    fn default() -> Self {
        Self {
            kind: TopologyKind::Complete,
            n_neighbors: 2,
            seed: 0,
        }
    }
}

/// Symmetric boolean adjacency with every self-loop set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionMatrix {
    adj: Vec<Vec<bool>>,
    kind: TopologyKind,
}

impl ConnectionMatrix {
    pub fn from_adjacency(adj: Vec<Vec<bool>>, kind: TopologyKind) -> Result<Self> {
        let k = adj.len();
        if k == 0 {
            return Err(Error::Topology("empty connection matrix".into()));
        }
        for (i, row) in adj.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Topology(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            if !row[i] {
                return Err(Error::Topology(format!(
                    "client {i} lacks its self-connection"
                )));
            }
            for j in 0..k {
                if row[j] != adj[j][i] {
                    return Err(Error::Topology(format!(
                        "adjacency is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(ConnectionMatrix { adj, kind })
    }

    pub fn size(&self) -> usize {
        self.adj.len()
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.adj[i][j]
    }

    /// Neighbourhood of `i`, self included, ascending.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        (0..self.size()).filter(|&j| self.adj[i][j]).collect()
    }

    /// Neighbourhood size, self included.
    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].iter().filter(|b| **b).count()
    }

    pub fn is_connected(&self) -> bool {
        let k = self.size();
        let mut seen = vec![false; k];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..k {
                if self.adj[i][j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn build_topology(
    kind: TopologyKind,
    k: usize,
    n_neighbors: usize,
    seed: u64,
) -> Result<ConnectionMatrix> {
    if k == 0 {
        return Err(Error::Config("topology needs at least one client".into()));
    }
    let mut adj = vec![vec![false; k]; k];
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = true;
    }
    match kind {
        TopologyKind::Complete => {
            for row in &mut adj {
                row.fill(true);
            }
        }
        TopologyKind::Isolated => {}
        TopologyKind::Ring => {
            if !n_neighbors.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "ring needs an even n_neighbors, got {n_neighbors}"
                )));
            }
            if n_neighbors >= k {
                return Err(Error::Config(format!(
                    "ring with {k} clients cannot have {n_neighbors} neighbours"
                )));
            }
            for i in 0..k {
                for off in 1..=n_neighbors / 2 {
                    let j = (i + off) % k;
                    adj[i][j] = true;
                    adj[j][i] = true;
                }
            }
        }
        TopologyKind::Random => {
            if n_neighbors >= k {
                return Err(Error::Config(format!(
                    "random topology with {k} clients cannot have {n_neighbors} neighbours"
                )));
            }
            random_regular(&mut adj, n_neighbors, seed)?;
        }
    }
    ConnectionMatrix::from_adjacency(adj, kind)
}

const RANDOM_ATTEMPTS: usize = 100;

// Pairing model: n stubs per client, shuffled and matched. Rejects
// self-pairs and repeated pairs; keeps the attempt with most edges.
fn random_regular(adj: &mut [Vec<bool>], n: usize, seed: u64) -> Result<()> {
    let k = adj.len();
    if n == 0 {
        return Ok(());
    }
    let target = k * n;
    let mut best: Option<Vec<(usize, usize)>> = None;
    for attempt in 0..RANDOM_ATTEMPTS {
        let mut r = rng::stream(seed, rng::GLOBAL, attempt as u64, Purpose::Topology);
        let mut stubs: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        stubs.shuffle(&mut r);
        let mut edges = Vec::new();
        let mut used = vec![vec![false; k]; k];
        for pair in stubs.chunks(2) {
            if let [a, b] = *pair {
                if a != b && !used[a][b] {
                    used[a][b] = true;
                    used[b][a] = true;
                    edges.push((a, b));
                }
            }
        }
        let exact = 2 * edges.len() == target;
        if best.as_ref().is_none_or(|b| edges.len() > b.len()) {
            best = Some(edges);
        }
        if exact {
            break;
        }
    }
    let edges = best.unwrap_or_default();
    if 2 * edges.len() != target {
        log::warn!(
            "random topology: no exact {n}-regular graph on {k} clients after {RANDOM_ATTEMPTS} attempts; \
             using one with {} edges",
            edges.len()
        );
    }
    for (a, b) in edges {
        adj[a][b] = true;
        adj[b][a] = true;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingRule {
    /// `w_ij = 1/max(|M_i|, |M_j|)`, diagonal takes the remainder.
    #[default]
    MetropolisHastings,
    /// `w_ij = 1/|M_i|`; doubly stochastic only for regular graphs.
    Uniform,
}

/// Row-stochastic weights over a connection graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    pub weights: Matrix,
}

pub fn mixing_matrix(conn: &ConnectionMatrix, rule: MixingRule) -> MixingMatrix {
    let k = conn.size();
    let deg: Vec<usize> = (0..k).map(|i| conn.degree(i)).collect();
    let mut w = Matrix::zeros(k, k);
    for i in 0..k {
        match rule {
            MixingRule::MetropolisHastings => {
                let mut off = 0.0;
                for j in 0..k {
                    if i != j && conn.connected(i, j) {
                        let v = 1.0 / deg[i].max(deg[j]) as f64;
                        w.set(i, j, v);
                        off += v;
                    }
                }
                // exact 1/K on complete graphs, remainder otherwise
                let diag = if deg.iter().all(|&d| d == deg[i]) {
                    1.0 / deg[i] as f64
                } else {
                    1.0 - off
                };
                w.set(i, i, diag);
            }
            MixingRule::Uniform => {
                for j in 0..k {
                    if conn.connected(i, j) {
                        w.set(i, j, 1.0 / deg[i] as f64);
                    }
                }
            }
        }
    }
    MixingMatrix { weights: w }
}

impl MixingMatrix {
    pub fn size(&self) -> usize {
        self.weights.rows()
    }

    pub fn identity(k: usize) -> Self {
        MixingMatrix {
            weights: Matrix::identity(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGap {
    pub zeta: f64,
    pub eigenvalues: Vec<f64>,
    pub connected: bool,
    pub warning: Option<String>,
}

/// `ζ = max_{i≥2} |λ_i(M)|`. Disconnected graphs give `ζ = 1` plus a warning.
pub fn spectral_gap(mix: &MixingMatrix, conn: Option<&ConnectionMatrix>) -> Result<SpectralGap> {
    let eig = sym_eig(&mix.weights)?;
    let values = eig.values;
    let top = values[0];
    if (top - 1.0).abs() > 1e-8 {
        return Err(Error::Invariant(format!(
            "leading mixing eigenvalue is {top}, expected 1"
        )));
    }
    let mut zeta = values[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let connected = match conn {
        Some(c) => c.is_connected(),
        None => mix_connected(&mix.weights),
    };
    let mut warning = None;
    if !connected {
        zeta = 1.0;
        let msg = "topology is disconnected; ζ = 1 and clients never reach consensus".to_string();
        if conn.is_none_or(|c| c.kind() != TopologyKind::Isolated) {
            log::warn!("{msg}");
        }
        warning = Some(msg);
    }
    Ok(SpectralGap {
        zeta: zeta.min(1.0),
        eigenvalues: values,
        connected,
        warning,
    })
}

fn mix_connected(w: &Matrix) -> bool {
    let k = w.rows();
    let adj = (0..k)
        .map(|i| (0..k).map(|j| i == j || w.get(i, j) != 0.0).collect())
        .collect();
    ConnectionMatrix {
        adj,
        kind: TopologyKind::Random,
    }
    .is_connected()
}
