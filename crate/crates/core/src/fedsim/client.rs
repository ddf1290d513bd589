//! Per-client state, the local objective and its gradient, and local
//! optimization.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{self, ModelConfig, ModelParams, ParamGroup};
use crate::graph::{GraphSample, TaskType};
use crate::mtl::{self, MtlConfig, TaskCovariance, WeightedCovariance};
use crate::rng::{self, Purpose};
use crate::tensor::{GradTape, Matrix, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        epsilon: f64,
    },
    Sgd,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_eps(),
        }
    }
}

/// Adam moments, one pair per parameter matrix. Never shared between
/// clients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .entries()
            .iter()
            .map(|e| Matrix::zeros(e.2.rows(), e.2.cols()))
            .collect();
        OptimizerState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<ParamId, Matrix>,
        eta: f64,
        cfg: &OptimizerConfig,
    ) -> Result<()> {
        self.step += 1;
        for (id, _, w) in params.entries_mut() {
            let g = grads
                .get(&id)
                .ok_or_else(|| Error::Lookup(format!("no gradient for parameter {}", id.0)))?;
            if g.shape() != w.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape mismatch for parameter {}",
                    id.0
                )));
            }
            match *cfg {
                OptimizerConfig::Sgd => w.axpy(-eta, g)?,
                OptimizerConfig::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let m = &mut self.first[id.0];
                    let v = &mut self.second[id.0];
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    let (ms, vs, ws, gs) = (
                        m.as_mut_slice(),
                        v.as_mut_slice(),
                        w.as_mut_slice(),
                        g.as_slice(),
                    );
                    for i in 0..gs.len() {
                        ms[i] = beta1 * ms[i] + (1.0 - beta1) * gs[i];
                        vs[i] = beta2 * vs[i] + (1.0 - beta2) * gs[i] * gs[i];
                        let mh = ms[i] / c1;
                        let vh = vs[i] / c2;
                        ws[i] -= eta * mh / (vh.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything a client needs from the run configuration.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub model: ModelConfig,
    pub mtl: MtlConfig,
    pub task_type: TaskType,
    pub optimizer: OptimizerConfig,
    pub eta: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
    pub max_loss: f64,
    /// Maintain a task covariance (closed-form refresh each epoch).
    pub uses_omega: bool,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Training samples with at least one label in `task_set`.
    pub samples: Vec<GraphSample>,
    pub task_set: Vec<usize>,
    pub params: ModelParams,
    pub omega: Option<TaskCovariance>,
    /// Latest covariances received from the other neighbourhood members:
    /// `(client, covariance, sample count)`.
    pub neighbor_omegas: Vec<(usize, TaskCovariance, usize)>,
    pub optimizer: OptimizerState,
}

impl ClientState {
    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn task_ids(&self) -> &[usize] {
        &self.params.task_ids
    }

    /// Zeroes task-head gradient columns for tasks this client has no
    /// labels for. Those columns are copies of neighbours' heads and only
    /// change at synchronization.
    pub fn freeze_foreign_columns(&self, grads: &mut BTreeMap<ParamId, Matrix>) -> Result<()> {
        let g = grads
            .get_mut(&self.params.task_param_id())
            .ok_or_else(|| Error::Lookup("task head gradient missing".into()))?;
        for (c, t) in self.params.task_ids.iter().enumerate() {
            if !self.task_set.contains(t) {
                for r in 0..g.rows() {
                    g.set(r, c, 0.0);
                }
            }
        }
        Ok(())
    }

    /// Every neighbourhood member's covariance, self included, ordered by
    /// client id.
    pub fn neighborhood(&self) -> Vec<WeightedCovariance<'_>> {
        let mut out: Vec<(usize, WeightedCovariance<'_>)> = self
            .neighbor_omegas
            .iter()
            .map(|(j, cov, n)| (*j, (cov, *n)))
            .collect();
        if let Some(own) = &self.omega {
            out.push((self.id, (own, self.num_samples())));
        }
        out.sort_by_key(|e| e.0);
        out.into_iter().map(|e| e.1).collect()
    }
}

/// Mean data loss and gradient of the full local objective on a batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: f64,
    pub grads: BTreeMap<ParamId, Matrix>,
}

fn frobenius_weight(cfg: &MtlConfig, group: ParamGroup) -> f64 {
    cfg.lambda_chi.get(group)
}

/// Gradient of `mean_batch(loss) + regularizers` at `params`. The task
/// head's gradient includes the neighbourhood covariance term.
pub fn batch_gradient(
    state: &ClientState,
    params: &ModelParams,
    batch: &[&GraphSample],
    ctx: &TrainContext,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::TrainingStep(format!(
            "client {}: empty batch",
            state.id
        )));
    }
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape);
    let mut losses = Vec::with_capacity(batch.len());
    let mut labelled = false;
    for s in batch {
        labelled |= params
            .task_ids
            .iter()
            .any(|&t| s.label_mask.get(t).copied().unwrap_or(false));
        let pred =
            gnn::classifier_forward(&mut tape, s, &vars, &ctx.model, dropout.as_deref_mut())?;
        losses.push(mtl::masked_loss(
            &mut tape,
            pred,
            &s.label,
            &s.label_mask,
            &params.task_ids,
            ctx.task_type,
        )?);
    }
    if !labelled {
        return Err(Error::TrainingStep(format!(
            "client {}: batch has no label on any of its tasks",
            state.id
        )));
    }
    let total = tape.sum_scalars(&losses)?;
    let data = tape.scale(total, 1.0 / batch.len() as f64);
    let loss = tape.scalar(data);
    let mut terms = vec![data];
    for (id, group, m) in params.entries() {
        let lambda = frobenius_weight(&ctx.mtl, group);
        if group != ParamGroup::Task && lambda != 0.0 {
            let v = tape.param(id, m.clone());
            let sq = tape.sum_squares(v);
            terms.push(tape.scale(sq, 0.5 * lambda));
        }
    }
    let objective = tape.sum_scalars(&terms)?;
    let mut grads: BTreeMap<ParamId, Matrix> = tape
        .backward(objective)?
        .iter()
        .map(|(k, v)| (*k, v.clone()))
        .collect();
    let tid = params.task_param_id();
    let dl = grads
        .remove(&tid)
        .ok_or_else(|| Error::Lookup("task head gradient missing".into()))?;
    let hood = state.neighborhood();
    let g = mtl::grad_task_head(&dl, &params.readout.task, &params.task_ids, &hood, &ctx.mtl)?;
    grads.insert(tid, g);
    Ok(BatchGradient { loss, grads })
}

/// Value of the full local objective at `params` over `samples`, without
/// dropout. Independent of [`batch_gradient`] except for the forward pass.
pub fn objective_value(
    state: &ClientState,
    params: &ModelParams,
    samples: &[&GraphSample],
    ctx: &TrainContext,
) -> Result<f64> {
    let mut data = 0.0;
    for s in samples {
        let pred = gnn::predict(s, params, &ctx.model)?;
        let (target, weight) = mtl::loss_weights(&s.label, &s.label_mask, &params.task_ids)?;
        for j in 0..pred.len() {
            if weight[j] == 0.0 {
                continue;
            }
            let z = pred[j];
            data += weight[j]
                * match ctx.task_type {
                    TaskType::Classification => {
                        z.max(0.0) - target[j] * z + (-z.abs()).exp().ln_1p()
                    }
                    TaskType::Regression => (z - target[j]) * (z - target[j]),
                };
        }
    }
    let mut value = data / samples.len() as f64;
    for (_, group, m) in params.entries() {
        if group != ParamGroup::Task {
            value += 0.5 * frobenius_weight(&ctx.mtl, group) * m.frobenius_sq();
        }
    }
    value += task_regularizer(state, params, ctx)?;
    Ok(value)
}

fn task_regularizer(state: &ClientState, params: &ModelParams, ctx: &TrainContext) -> Result<f64> {
    let phi = &params.readout.task;
    if ctx.mtl.lambda1 == 0.0 {
        return Ok(0.5 * ctx.mtl.lambda_chi.task * phi.frobenius_sq());
    }
    mtl::neighborhood_regularizer(phi, &params.task_ids, &state.neighborhood(), &ctx.mtl)
}

/// Runs `local_epochs` epochs of minibatch training for one round and
/// returns the mean batch loss.
pub fn local_round(state: &mut ClientState, ctx: &TrainContext, round: usize) -> Result<f64> {
    if state.samples.is_empty() {
        return Err(Error::TrainingStep(format!(
            "client {} has no labelled samples",
            state.id
        )));
    }
    let id = state.id as u64;
    let mut shuffle = rng::stream(ctx.seed, id, round as u64, Purpose::Shuffle);
    let mut dropout = rng::stream(ctx.seed, id, round as u64, Purpose::Dropout);
    let batch = ctx.batch_size.max(1);
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for _ in 0..ctx.local_epochs {
        let mut order: Vec<usize> = (0..state.samples.len()).collect();
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(batch) {
            let refs: Vec<&GraphSample> = chunk.iter().map(|&i| &state.samples[i]).collect();
            let mut bg = batch_gradient(state, &state.params, &refs, ctx, Some(&mut dropout))?;
            if !bg.loss.is_finite() || bg.loss > ctx.max_loss {
                return Err(Error::Diverged {
                    round,
                    reason: format!("client {} batch loss {}", state.id, bg.loss),
                });
            }
            state.freeze_foreign_columns(&mut bg.grads)?;
            state
                .optimizer
                .apply(&mut state.params, &bg.grads, ctx.eta, &ctx.optimizer)?;
            loss_sum += bg.loss;
            batches += 1;
        }
        if !state.params.is_finite() {
            return Err(Error::Diverged {
                round,
                reason: format!("client {} parameters became non-finite", state.id),
            });
        }
        if ctx.uses_omega {
            state.omega = Some(mtl::omega_closed_form(
                &state.params.readout.task,
                &state.params.task_ids,
            )?);
        }
    }
    Ok(loss_sum / batches.max(1) as f64)
}

/// Full-batch gradient of the local objective (no dropout).
pub fn full_gradient(
    state: &ClientState,
    params: &ModelParams,
    ctx: &TrainContext,
) -> Result<BatchGradient> {
    let refs: Vec<&GraphSample> = state.samples.iter().collect();
    batch_gradient(state, params, &refs, ctx, None)
}
