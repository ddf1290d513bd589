//! The federated training engine.
//!
//! A run splits the training data over clients, trains each client on
//! its own masked labels, and every `tau` rounds synchronizes according
//! to the algorithm:
//!
//! | algorithm   | shared weights              | task covariance              |
//! |-------------|-----------------------------|------------------------------|
//! | `spreadgnn` | neighbour mixing matrix     | neighbourhood exchange       |
//! | `fedgmtl`   | uniform mean via a server   | one server-side covariance   |
//! | `fedavg`    | uniform mean via a server   | none (`lambda1` forced to 0) |
//! | `isolated`  | never                       | none (`lambda1` forced to 0) |
//!
//! Clients train in parallel between synchronization points. Every random
//! draw comes from a stream keyed by `(seed, client, round, purpose)` and
//! every reduction runs in client order, so results do not depend on the
//! thread count.

pub mod client;
pub mod estimate;
pub mod eval;
pub mod sync;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{ModelConfig, ModelParams, ParamGroup};
use crate::graph::{
    train_test_split, Dataset, DatasetManifest, GraphSample, Standardizer, TaskType,
};
use crate::mtl::{MtlConfig, TaskCovariance};
use crate::partition::{self, ClientDataset, PartitionConfig};
use crate::tensor::Matrix;
use crate::topology::{
    self, ConnectionMatrix, MixingMatrix, MixingRule, TopologyKind, TopologySpec,
};

pub use client::{ClientState, OptimizerConfig, OptimizerState, TrainContext};
pub use eval::Evaluation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Spreadgnn,
    Fedgmtl,
    Fedavg,
    Isolated,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Spreadgnn => "spreadgnn",
            Algorithm::Fedgmtl => "fedgmtl",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Isolated => "isolated",
        }
    }

    pub fn uses_omega(self) -> bool {
        matches!(self, Algorithm::Spreadgnn | Algorithm::Fedgmtl)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spreadgnn" => Ok(Algorithm::Spreadgnn),
            "fedgmtl" => Ok(Algorithm::Fedgmtl),
            "fedavg" => Ok(Algorithm::Fedavg),
            "isolated" => Ok(Algorithm::Isolated),
            other => Err(Error::Config(format!(
                "unknown algorithm '{other}' (expected spreadgnn, fedgmtl, fedavg or isolated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Rounds between synchronizations.
    pub tau: usize,
    pub eta: f64,
    pub optimizer: OptimizerConfig,
    pub mtl: MtlConfig,
    pub partition: PartitionConfig,
    pub topology: TopologySpec,
    pub mixing: MixingRule,
    pub model: ModelConfig,
    pub seed: u64,
    pub test_fraction: f64,
    /// Standardize regression targets with training-split statistics.
    pub standardize: bool,
    /// Average with raw `1/N_j` weights divided by the neighbourhood size.
    pub literal_avg: bool,
    /// Worker threads for client training; 0 uses the global pool.
    pub threads: usize,
    /// Compute the full-batch gradient norm at the averaged model each round.
    pub track_grad_norm: bool,
    /// Divergence guard on the batch loss.
    pub max_loss: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Spreadgnn,
            rounds: 150,
            local_epochs: 1,
            batch_size: 1,
            tau: 1,
            eta: 0.0015,
            optimizer: OptimizerConfig::default(),
            mtl: MtlConfig::default(),
            partition: PartitionConfig::default(),
            topology: TopologySpec::default(),
            mixing: MixingRule::default(),
            model: ModelConfig::default(),
            seed: 0,
            test_fraction: 0.2,
            standardize: true,
            literal_avg: false,
            threads: 0,
            track_grad_norm: true,
            max_loss: 1e6,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("tau", self.tau),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        if !(self.max_loss > 0.0) {
            return Err(Error::Config("max_loss must be positive".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        self.mtl.validate()?;
        self.partition.validate()?;
        self.model.validate()
    }

    /// The objective settings actually trained: baselines without a task
    /// covariance drop the trace term.
    pub fn effective_mtl(&self) -> MtlConfig {
        let mut m = self.mtl.clone();
        if !self.algorithm.uses_omega() {
            m.lambda1 = 0.0;
        }
        m
    }
}

/// One round's measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub per_client: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub client_loss: Vec<f64>,
    pub loss: f64,
    /// `‖∇F(u_t)‖²` at the averaged model, if tracked.
    pub grad_norm_sq: Option<f64>,
    pub consensus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub records: Vec<MetricsRecord>,
    /// Global objective at initialization.
    pub initial_objective: f64,
    pub zeta: f64,
    pub connected: bool,
    pub final_mean: Option<f64>,
    pub task_sets: Vec<Vec<usize>>,
    pub sample_counts: Vec<usize>,
}

pub struct Simulation {
    pub cfg: SimConfig,
    pub manifest: DatasetManifest,
    pub clients: Vec<ClientState>,
    pub test: Vec<GraphSample>,
    pub conn: ConnectionMatrix,
    pub mix: MixingMatrix,
    pub standardizer: Option<Standardizer>,
    pub ctx: TrainContext,
    pool: Option<rayon::ThreadPool>,
    round: usize,
}

impl Simulation {
    /// Splits, standardizes, partitions and masks `dataset`, then builds
    /// the clients.
    pub fn new(cfg: SimConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        dataset.manifest.validate()?;
        let (train, test) = train_test_split(&dataset.samples, cfg.test_fraction, cfg.seed)?;
        let (train, standardizer) =
            if dataset.manifest.task_type == TaskType::Regression && cfg.standardize {
                let st = Standardizer::fit(&train, dataset.manifest.num_tasks);
                (st.apply(&train), Some(st))
            } else {
                (train, None)
            };
        let parts = partition::dirichlet_quantity_split(&train, &cfg.partition)?;
        let masks = partition::assign_task_masks(&cfg.partition, dataset.manifest.num_tasks)?;
        let clients = parts
            .into_iter()
            .zip(&masks)
            .map(|(samples, set)| partition::apply_mask(samples, set))
            .collect();
        Simulation::from_clients(cfg, dataset.manifest.clone(), clients, test, standardizer)
    }

    /// Builds a simulation from already-partitioned client data.
    pub fn from_clients(
        cfg: SimConfig,
        manifest: DatasetManifest,
        data: Vec<ClientDataset>,
        test: Vec<GraphSample>,
        standardizer: Option<Standardizer>,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = data.len();
        if k == 0 {
            return Err(Error::Config("no clients".into()));
        }
        let s_global = manifest.num_tasks;
        let (kind, n) = match cfg.algorithm {
            Algorithm::Spreadgnn => (cfg.topology.kind, cfg.topology.n_neighbors),
            Algorithm::Fedgmtl | Algorithm::Fedavg => (TopologyKind::Complete, 0),
            Algorithm::Isolated => (TopologyKind::Isolated, 0),
        };
        let conn = topology::build_topology(kind, k, n, cfg.topology.seed)?;
        let mix = match cfg.algorithm {
            Algorithm::Spreadgnn => topology::mixing_matrix(&conn, cfg.mixing),
            Algorithm::Fedgmtl | Algorithm::Fedavg => MixingMatrix {
                weights: Matrix::filled(k, k, 1.0 / k as f64),
            },
            Algorithm::Isolated => MixingMatrix::identity(k),
        };
        let all_tasks: Vec<usize> = {
            let mut v: Vec<usize> = data
                .iter()
                .flat_map(|d| d.task_set.iter().copied())
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut clients = Vec::with_capacity(k);
        for (id, d) in data.iter().enumerate() {
            let union: Vec<usize> = match cfg.algorithm {
                Algorithm::Spreadgnn => {
                    let mut v: Vec<usize> = conn
                        .neighborhood(id)
                        .into_iter()
                        .flat_map(|j| data[j].task_set.iter().copied())
                        .collect();
                    v.sort_unstable();
                    v.dedup();
                    v
                }
                Algorithm::Fedgmtl | Algorithm::Fedavg => all_tasks.clone(),
                Algorithm::Isolated => d.task_set.clone(),
            };
            if let Some(&bad) = union.iter().find(|&&t| t >= s_global) {
                return Err(Error::Config(format!(
                    "task {bad} outside {s_global} tasks"
                )));
            }
            let samples: Vec<GraphSample> = d
                .samples
                .iter()
                .filter(|s| {
                    d.task_set
                        .iter()
                        .any(|&t| s.label_mask.get(t).copied().unwrap_or(false))
                })
                .cloned()
                .collect();
            if samples.is_empty() {
                return Err(Error::TrainingStep(format!(
                    "client {id} has no labelled sample for its tasks {:?}",
                    d.task_set
                )));
            }
            for (i, s) in samples.iter().enumerate() {
                s.validate(&manifest)
                    .map_err(|e| Error::Validation(format!("client {id} sample {i}: {e}")))?;
            }
            let params = ModelParams::init(&cfg.model, manifest.d_input, &union, cfg.seed)?;
            let omega = if cfg.algorithm.uses_omega() {
                Some(TaskCovariance::uniform(&union)?)
            } else {
                None
            };
            clients.push(ClientState {
                id,
                samples,
                task_set: d.task_set.clone(),
                optimizer: OptimizerState::new(&params),
                params,
                omega,
                neighbor_omegas: Vec::new(),
            });
        }
        if cfg.algorithm == Algorithm::Spreadgnn {
            let snapshot: Vec<(TaskCovariance, usize)> = clients
                .iter()
                .map(|c| {
                    (
                        c.omega.clone().expect("spreadgnn keeps a covariance"),
                        c.num_samples(),
                    )
                })
                .collect();
            for c in &mut clients {
                c.neighbor_omegas = conn
                    .neighborhood(c.id)
                    .into_iter()
                    .filter(|&j| j != c.id)
                    .map(|j| (j, snapshot[j].0.clone(), snapshot[j].1))
                    .collect();
            }
        }
        let ctx = TrainContext {
            model: cfg.model.clone(),
            mtl: cfg.effective_mtl(),
            task_type: manifest.task_type,
            optimizer: cfg.optimizer,
            eta: cfg.eta,
            batch_size: cfg.batch_size,
            local_epochs: cfg.local_epochs,
            seed: cfg.seed,
            max_loss: cfg.max_loss,
            uses_omega: cfg.algorithm.uses_omega(),
        };
        let pool = if cfg.threads > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Simulation {
            cfg,
            manifest,
            clients,
            test,
            conn,
            mix,
            standardizer,
            ctx,
            pool,
            round: 0,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Local training for the next round; returns each client's mean loss.
    pub fn train_round(&mut self) -> Result<Vec<f64>> {
        let round = self.round + 1;
        let ctx = self.ctx.clone();
        let mut clients = std::mem::take(&mut self.clients);
        let results: Vec<Result<f64>> = self.install(|| {
            clients
                .par_iter_mut()
                .map(|c| client::local_round(c, &ctx, round))
                .collect()
        });
        self.clients = clients;
        self.round = round;
        results.into_iter().collect()
    }

    /// Communication step of the configured algorithm.
    pub fn synchronize(&mut self) -> Result<()> {
        let s_global = self.manifest.num_tasks;
        match self.cfg.algorithm {
            Algorithm::Spreadgnn => {
                sync::omega_exchange(&mut self.clients, &self.conn, &self.ctx.mtl, s_global)?;
                sync::periodic_average(&mut self.clients, &self.mix, self.cfg.literal_avg)
            }
            Algorithm::Fedgmtl => {
                sync::global_omega(&mut self.clients, &self.ctx.mtl, s_global)?;
                sync::server_average(&mut self.clients, self.cfg.literal_avg)
            }
            Algorithm::Fedavg => sync::server_average(&mut self.clients, self.cfg.literal_avg),
            Algorithm::Isolated => Ok(()),
        }
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        self.install(|| {
            eval::evaluate(
                &self.clients,
                &self.test,
                self.manifest.task_type,
                &self.cfg.model,
                self.standardizer.as_ref(),
            )
        })
    }

    /// `‖∇F(u)‖²` where `u` averages the shared groups and `F` is the mean
    /// of the clients' full-batch objectives.
    pub fn grad_norm_sq(&self) -> Result<f64> {
        let ctx = &self.ctx;
        let clients = &self.clients;
        let grads: Vec<client::BatchGradient> = self.install(|| {
            clients
                .par_iter()
                .map(|c| {
                    let u = sync::averaged_shared(clients, &c.params)?;
                    client::full_gradient(c, &u, ctx)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let k = clients.len() as f64;
        let first = &clients[0].params;
        let mut total = 0.0;
        for (id, group, m) in first.entries() {
            if group == ParamGroup::Task {
                continue;
            }
            let mut acc = Matrix::zeros(m.rows(), m.cols());
            for g in &grads {
                acc.axpy(1.0 / k, &g.grads[&id])?;
            }
            total += acc.frobenius_sq();
        }
        for (c, g) in clients.iter().zip(&grads) {
            total += g.grads[&c.params.task_param_id()].frobenius_sq() / (k * k);
        }
        Ok(total)
    }

    /// Mean over clients of the full local objective.
    pub fn global_objective(&self) -> Result<f64> {
        let ctx = &self.ctx;
        let values: Vec<f64> = self.install(|| {
            self.clients
                .par_iter()
                .map(|c| {
                    let refs: Vec<&GraphSample> = c.samples.iter().collect();
                    client::objective_value(c, &c.params, &refs, ctx)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Trains one round, synchronizes if due, and measures.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let client_loss = self.train_round()?;
        if self.round.is_multiple_of(self.cfg.tau) {
            self.synchronize()?;
        }
        let eval = self.evaluate()?;
        let grad_norm_sq = if self.cfg.track_grad_norm {
            Some(self.grad_norm_sq()?)
        } else {
            None
        };
        let consensus = sync::consensus_distance(&self.clients)?;
        let loss = client_loss.iter().sum::<f64>() / client_loss.len() as f64;
        Ok(MetricsRecord {
            round: self.round,
            per_client: eval.per_client,
            mean: eval.mean,
            client_loss,
            loss,
            grad_norm_sq,
            consensus,
        })
    }

    pub fn run(&mut self) -> Result<RunSummary> {
        let initial_objective = self.global_objective()?;
        let gap = topology::spectral_gap(&self.mix, Some(&self.conn))?;
        let mut records = Vec::with_capacity(self.cfg.rounds);
        while self.round < self.cfg.rounds {
            let r = self.step()?;
            log::info!(
                "{} round {}: loss {:.5} metric {:?}",
                self.cfg.algorithm.name(),
                r.round,
                r.loss,
                r.mean
            );
            records.push(r);
        }
        Ok(RunSummary {
            algorithm: self.cfg.algorithm,
            final_mean: records.last().and_then(|r| r.mean),
            records,
            initial_objective,
            zeta: gap.zeta,
            connected: gap.connected,
            task_sets: self.clients.iter().map(|c| c.task_set.clone()).collect(),
            sample_counts: self.clients.iter().map(|c| c.num_samples()).collect(),
        })
    }
}

/// Builds and runs a simulation end to end.
pub fn run(cfg: SimConfig, dataset: &Dataset) -> Result<RunSummary> {
    Simulation::new(cfg, dataset)?.run()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "round,client,metric,loss,grad_norm_sq,consensus";

/// Writes one row per client and a `mean` row per round.
pub fn write_metrics_csv(records: &[MetricsRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        let g = opt(r.grad_norm_sq);
        for (c, (m, l)) in r.per_client.iter().zip(&r.client_loss).enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round,
                c,
                opt(*m),
                l,
                g,
                r.consensus
            )?;
        }
        writeln!(
            out,
            "{},mean,{},{},{},{}",
            r.round,
            opt(r.mean),
            r.loss,
            g,
            r.consensus
        )?;
    }
    Ok(())
}

pub fn metrics_csv_string(records: &[MetricsRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_metrics_csv(records, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Invariant(e.to_string()))
}
