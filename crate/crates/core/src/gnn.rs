//! Graph classifier: message-passing layers followed by a pooled readout.
//!
//! Row convention: node states are `|V| × d` and weights multiply on the
//! right. A GraphSAGE layer computes
//! `h' = ReLU(h·Ψ + mean_{j∈N(i)} h_j · θ)`, which is `ReLU([h ‖ agg]·U)`
//! with `U` split into its self (update, Ψ) and neighbour (message, θ)
//! blocks. A GAT layer uses per-head transforms and attention vectors,
//! all counted in the message group θ.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphSample;
use crate::rng::{self, Purpose};
use crate::tensor::{GradTape, Matrix, ParamId, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnnVariant {
    Sage,
    Gat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: GnnVariant,
    pub layers: usize,
    pub hidden: usize,
    pub d_node: usize,
    pub d_pool: usize,
    pub heads: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    /// Apply ReLU after the task head. Off by default: the loss consumes
    /// the raw affine output as logits.
    pub readout_final_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: GnnVariant::Sage,
            layers: 2,
            hidden: 64,
            d_node: 64,
            d_pool: 64,
            heads: 2,
            leaky_slope: 0.2,
            dropout: 0.3,
            readout_final_relu: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.hidden == 0 || self.d_node == 0 || self.d_pool == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.variant == GnnVariant::Gat {
            if self.heads == 0 {
                return Err(Error::Config(
                    "GAT needs at least one attention head".into(),
                ));
            }
            for (i, d) in self.layer_dims(1).iter().enumerate() {
                if d.1 % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "layer {i} width {} is not divisible by {} heads",
                        d.1, self.heads
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(d_in, d_out)` per layer: `d_input → hidden → … → d_node`.
    pub fn layer_dims(&self, d_input: usize) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let d_in = if l == 0 { d_input } else { self.hidden };
                let d_out = if l + 1 == self.layers {
                    self.d_node
                } else {
                    self.hidden
                };
                (d_in, d_out)
            })
            .collect()
    }
}

/// Regularization groups of the learnable weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Message weights.
    Theta,
    /// Update weights.
    Psi,
    Pool,
    Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatHead {
    pub weight: Matrix,
    pub att_src: Matrix,
    pub att_dst: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Sage {
        self_weight: Matrix,
        neigh_weight: Matrix,
    },
    Gat {
        heads: Vec<GatHead>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams {
    /// `(d_input + d_node) × d_pool`
    pub pool: Matrix,
    /// `d_pool × S`, one column per entry of the owning model's task ids.
    pub task: Matrix,
}

/// Full learnable set of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub gnn: GnnParams,
    pub readout: ReadoutParams,
    /// Global task index of each task-head column, strictly increasing.
    pub task_ids: Vec<usize>,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl ModelParams {
    /// Initializes a model. Shared weights depend only on `seed`; each
    /// task-head column depends only on `(seed, global task id)`, so any
    /// two clients start from the same point on every column they share.
    pub fn init(cfg: &ModelConfig, d_input: usize, task_ids: &[usize], seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_task_ids(task_ids)?;
        let mut r = rng::stream(seed, rng::GLOBAL, 0, Purpose::Init);
        let layers = cfg
            .layer_dims(d_input)
            .into_iter()
            .map(|(d_in, d_out)| match cfg.variant {
                GnnVariant::Sage => LayerParams::Sage {
                    self_weight: glorot(d_in, d_out, &mut r),
                    neigh_weight: glorot(d_in, d_out, &mut r),
                },
                GnnVariant::Gat => {
                    let d_head = d_out / cfg.heads;
                    LayerParams::Gat {
                        heads: (0..cfg.heads)
                            .map(|_| GatHead {
                                weight: glorot(d_in, d_head, &mut r),
                                att_src: glorot(d_head, 1, &mut r),
                                att_dst: glorot(d_head, 1, &mut r),
                            })
                            .collect(),
                    }
                }
            })
            .collect();
        let pool = glorot(d_input + cfg.d_node, cfg.d_pool, &mut r);
        let bound = (6.0 / (cfg.d_pool + 1) as f64).sqrt();
        let mut task = Matrix::zeros(cfg.d_pool, task_ids.len());
        for (c, &t) in task_ids.iter().enumerate() {
            let mut tr = rng::stream(seed, rng::GLOBAL, 1 + t as u64, Purpose::Init);
            for row in 0..cfg.d_pool {
                task.set(row, c, tr.random_range(-bound..bound));
            }
        }
        Ok(ModelParams {
            gnn: GnnParams { layers },
            readout: ReadoutParams { pool, task },
            task_ids: task_ids.to_vec(),
        })
    }

    /// Every parameter matrix in a fixed order with its id and group.
    /// The task head always comes last.
    pub fn entries(&self) -> Vec<(ParamId, ParamGroup, &Matrix)> {
        let mut out = Vec::new();
        for layer in &self.gnn.layers {
            match layer {
                LayerParams::Sage {
                    self_weight,
                    neigh_weight,
                } => {
                    out.push((ParamGroup::Psi, self_weight));
                    out.push((ParamGroup::Theta, neigh_weight));
                }
                LayerParams::Gat { heads } => {
                    for h in heads {
                        out.push((ParamGroup::Theta, &h.weight));
                        out.push((ParamGroup::Theta, &h.att_src));
                        out.push((ParamGroup::Theta, &h.att_dst));
                    }
                }
            }
        }
        out.push((ParamGroup::Pool, &self.readout.pool));
        out.push((ParamGroup::Task, &self.readout.task));
        out.into_iter()
            .enumerate()
            .map(|(i, (g, m))| (ParamId(i), g, m))
            .collect()
    }

    pub fn entries_mut(&mut self) -> Vec<(ParamId, ParamGroup, &mut Matrix)> {
        let mut out: Vec<(ParamGroup, &mut Matrix)> = Vec::new();
        for layer in &mut self.gnn.layers {
            match layer {
                LayerParams::Sage {
                    self_weight,
                    neigh_weight,
                } => {
                    out.push((ParamGroup::Psi, self_weight));
                    out.push((ParamGroup::Theta, neigh_weight));
                }
                LayerParams::Gat { heads } => {
                    for h in heads {
                        out.push((ParamGroup::Theta, &mut h.weight));
                        out.push((ParamGroup::Theta, &mut h.att_src));
                        out.push((ParamGroup::Theta, &mut h.att_dst));
                    }
                }
            }
        }
        out.push((ParamGroup::Pool, &mut self.readout.pool));
        out.push((ParamGroup::Task, &mut self.readout.task));
        out.into_iter()
            .enumerate()
            .map(|(i, (g, m))| (ParamId(i), g, m))
            .collect()
    }

    pub fn task_param_id(&self) -> ParamId {
        ParamId(self.num_param_matrices() - 1)
    }

    pub fn num_param_matrices(&self) -> usize {
        let gnn: usize = self
            .gnn
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Sage { .. } => 2,
                LayerParams::Gat { heads } => 3 * heads.len(),
            })
            .sum();
        gnn + 2
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.entries().into_iter().find(|e| e.0 == id).map(|e| e.2)
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        for (pid, _, m) in self.entries_mut() {
            if pid == id {
                if m.shape() != value.shape() {
                    return Err(Error::Shape(format!("param {} shape mismatch", id.0)));
                }
                *m = value;
                return Ok(());
            }
        }
        Err(Error::Lookup(format!("model has no parameter {}", id.0)))
    }

    /// Column of the task head serving global task `task`, if any.
    pub fn task_column(&self, task: usize) -> Option<usize> {
        self.task_ids.binary_search(&task).ok()
    }

    pub fn is_finite(&self) -> bool {
        self.entries().iter().all(|e| e.2.is_finite())
    }

    /// Registers every parameter on `tape`.
    pub fn register(&self, tape: &mut GradTape) -> ParamVars {
        let mut next = 0usize;
        let mut take = |tape: &mut GradTape, m: &Matrix| {
            let v = tape.param(ParamId(next), m.clone());
            next += 1;
            v
        };
        let layers = self
            .gnn
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Sage {
                    self_weight,
                    neigh_weight,
                } => LayerVars::Sage {
                    self_weight: take(tape, self_weight),
                    neigh_weight: take(tape, neigh_weight),
                },
                LayerParams::Gat { heads } => LayerVars::Gat {
                    heads: heads
                        .iter()
                        .map(|h| GatHeadVars {
                            weight: take(tape, &h.weight),
                            att_src: take(tape, &h.att_src),
                            att_dst: take(tape, &h.att_dst),
                        })
                        .collect(),
                },
            })
            .collect();
        let pool = take(tape, &self.readout.pool);
        let task = take(tape, &self.readout.task);
        ParamVars { layers, pool, task }
    }
}

fn check_task_ids(task_ids: &[usize]) -> Result<()> {
    if task_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(
            "task ids must be strictly increasing".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct GatHeadVars {
    pub weight: Var,
    pub att_src: Var,
    pub att_dst: Var,
}

#[derive(Debug, Clone)]
pub enum LayerVars {
    Sage { self_weight: Var, neigh_weight: Var },
    Gat { heads: Vec<GatHeadVars> },
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<LayerVars>,
    pub pool: Var,
    pub task: Var,
}

/// Row-normalized adjacency: row `i` holds `1/deg(i)` on each neighbour.
/// Isolated nodes get a zero row, i.e. a zero aggregate.
pub fn mean_aggregation_matrix(n: usize, neighbors: &[Vec<usize>]) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for (i, list) in neighbors.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let w = 1.0 / list.len() as f64;
        for &j in list {
            a.add_at(i, j, w);
        }
    }
    a
}

/// 1 on edges and the diagonal.
pub fn attention_mask(n: usize, neighbors: &[Vec<usize>]) -> Matrix {
    let mut m = Matrix::identity(n);
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            m.set(i, j, 1.0);
        }
    }
    m
}

pub fn sage_layer(
    tape: &mut GradTape,
    h: Var,
    mean_agg: Var,
    self_weight: Var,
    neigh_weight: Var,
) -> Result<Var> {
    let agg = tape.matmul(mean_agg, h)?;
    let own = tape.matmul(h, self_weight)?;
    let msg = tape.matmul(agg, neigh_weight)?;
    let pre = tape.add(own, msg)?;
    Ok(tape.relu(pre))
}

pub fn gat_layer(
    tape: &mut GradTape,
    h: Var,
    mask: &Matrix,
    heads: &[GatHeadVars],
    leaky_slope: f64,
) -> Result<Var> {
    let mut out: Option<Var> = None;
    for head in heads {
        let wh = tape.matmul(h, head.weight)?;
        let s_src = tape.matmul(wh, head.att_src)?;
        let s_dst = tape.matmul(wh, head.att_dst)?;
        let scores = tape.outer_add(s_src, s_dst)?;
        let scores = tape.leaky_relu(scores, leaky_slope);
        let alpha = tape.masked_softmax_rows(scores, mask.clone())?;
        let mixed = tape.matmul(alpha, wh)?;
        out = Some(match out {
            None => mixed,
            Some(prev) => tape.concat_cols(prev, mixed)?,
        });
    }
    let cat = out.ok_or_else(|| Error::Config("GAT layer without heads".into()))?;
    Ok(tape.relu(cat))
}

/// `MEAN_v (ReLU(ReLU([x_v ‖ h_v]·Φ_pool)·Φ_task))`, the last ReLU only if
/// `final_relu` is set.
pub fn readout(
    tape: &mut GradTape,
    h: Var,
    x: Var,
    pool: Var,
    task: Var,
    final_relu: bool,
) -> Result<Var> {
    let z = tape.concat_cols(x, h)?;
    let p = tape.matmul(z, pool)?;
    let p = tape.relu(p);
    let mut q = tape.matmul(p, task)?;
    if final_relu {
        q = tape.relu(q);
    }
    tape.mean_rows(q)
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    Matrix::from_fn(
        rows,
        cols,
        |_, _| if rng.random::<f64>() < p { 0.0 } else { keep },
    )
}

/// Full forward pass for one graph; returns a `1 × S` prediction row.
/// Dropout is applied to every layer's node states when `dropout_rng`
/// is given and the configured rate is positive.
pub fn classifier_forward(
    tape: &mut GradTape,
    sample: &GraphSample,
    vars: &ParamVars,
    cfg: &ModelConfig,
    mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<Var> {
    let n = sample.num_nodes();
    let neighbors = sample.neighbors();
    let x = tape.constant(sample.node_features.clone());
    let mut h = x;
    let structure = match cfg.variant {
        GnnVariant::Sage => tape.constant(mean_aggregation_matrix(n, &neighbors)),
        GnnVariant::Gat => tape.constant(Matrix::zeros(0, 0)),
    };
    let mask = match cfg.variant {
        GnnVariant::Gat => attention_mask(n, &neighbors),
        GnnVariant::Sage => Matrix::zeros(0, 0),
    };
    for layer in &vars.layers {
        h = match layer {
            LayerVars::Sage {
                self_weight,
                neigh_weight,
            } => sage_layer(tape, h, structure, *self_weight, *neigh_weight)?,
            LayerVars::Gat { heads } => gat_layer(tape, h, &mask, heads, cfg.leaky_slope)?,
        };
        if let Some(r) = dropout_rng.as_deref_mut() {
            if cfg.dropout > 0.0 {
                let (rows, cols) = tape.value(h).shape();
                h = tape.mul_const(h, dropout_mask(rows, cols, cfg.dropout, r))?;
            }
        }
    }
    readout(tape, h, x, vars.pool, vars.task, cfg.readout_final_relu)
}

/// Inference-mode prediction (no dropout), one value per head column.
pub fn predict(sample: &GraphSample, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let out = classifier_forward(&mut tape, sample, &vars, cfg, None)?;
    Ok(tape.value(out).as_slice().to_vec())
}

/// Single SAGE layer on plain matrices.
pub fn sage_layer_forward(
    node_states: &Matrix,
    edges: &[(usize, usize)],
    self_weight: &Matrix,
    neigh_weight: &Matrix,
) -> Result<Matrix> {
    let n = node_states.rows();
    let nb = neighbor_lists(n, edges)?;
    let mut tape = GradTape::new();
    let h = tape.constant(node_states.clone());
    let a = tape.constant(mean_aggregation_matrix(n, &nb));
    let ws = tape.constant(self_weight.clone());
    let wn = tape.constant(neigh_weight.clone());
    let out = sage_layer(&mut tape, h, a, ws, wn)?;
    Ok(tape.value(out).clone())
}

/// Single GAT layer on plain matrices.
pub fn gat_layer_forward(
    node_states: &Matrix,
    edges: &[(usize, usize)],
    heads: &[GatHead],
    leaky_slope: f64,
) -> Result<Matrix> {
    let n = node_states.rows();
    let nb = neighbor_lists(n, edges)?;
    let mut tape = GradTape::new();
    let h = tape.constant(node_states.clone());
    let hv: Vec<GatHeadVars> = heads
        .iter()
        .map(|hd| GatHeadVars {
            weight: tape.constant(hd.weight.clone()),
            att_src: tape.constant(hd.att_src.clone()),
            att_dst: tape.constant(hd.att_dst.clone()),
        })
        .collect();
    let out = gat_layer(&mut tape, h, &attention_mask(n, &nb), &hv, leaky_slope)?;
    Ok(tape.value(out).clone())
}

/// Readout on plain matrices.
pub fn readout_forward(
    node_states: &Matrix,
    node_features: &Matrix,
    params: &ReadoutParams,
    final_relu: bool,
) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let h = tape.constant(node_states.clone());
    let x = tape.constant(node_features.clone());
    let p = tape.constant(params.pool.clone());
    let t = tape.constant(params.task.clone());
    let out = readout(&mut tape, h, x, p, t, final_relu)?;
    Ok(tape.value(out).as_slice().to_vec())
}

fn neighbor_lists(n: usize, edges: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    let mut adj = vec![Vec::new(); n];
    for &(s, d) in edges {
        if s >= n || d >= n {
            return Err(Error::Shape(format!("edge ({s},{d}) outside {n} nodes")));
        }
        adj[s].push(d);
        adj[d].push(s);
    }
    for l in &mut adj {
        l.sort_unstable();
    }
    Ok(adj)
}
