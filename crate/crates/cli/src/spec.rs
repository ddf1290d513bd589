//! Experiment specification: a flat JSON object holding every
//! [`SimConfig`] key plus the driver keys listed in [`DRIVER_KEYS`].
//!
//! Precedence is defaults, then the config file, then command-line flags.
//! A sweep seed (or `--seed`) sets the run, partition and topology seeds
//! together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use fedmtl::fedsim::{Algorithm, SimConfig};
use fedmtl::synthetic::SyntheticConfig;
use fedmtl::topology::TopologyKind;

use crate::error::{CliError, Result};

pub const DEFAULT_SWEEP_CAP: usize = 512;

/// Keys handled by the driver rather than the simulator.
pub const DRIVER_KEYS: [&str; 7] = [
    "dataset",
    "synthetic",
    "out",
    "sweep",
    "baselines",
    "sweep_cap",
    "bound_estimate",
];

/// Lists of values to cross. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub tau: Vec<usize>,
    pub lambda1: Vec<f64>,
    pub topology: Vec<TopologyKind>,
    pub n_neighbors: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// Probing budget for the smoothness and noise estimates fed to the bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundEstimate {
    pub enabled: bool,
    pub probes: usize,
    pub radius: f64,
    pub draws: usize,
}

impl Default for BoundEstimate {
    fn default() -> Self {
        Self {
            enabled: true,
            probes: 2,
            radius: 1e-3,
            draws: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DriverPart {
    dataset: Option<PathBuf>,
    synthetic: Option<SyntheticConfig>,
    out: PathBuf,
    sweep: SweepAxes,
    baselines: Vec<Algorithm>,
    sweep_cap: usize,
    bound_estimate: BoundEstimate,
}

impl Default for DriverPart {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: None,
            out: PathBuf::from("out"),
            sweep: SweepAxes::default(),
            baselines: Vec::new(),
            sweep_cap: DEFAULT_SWEEP_CAP,
            bound_estimate: BoundEstimate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub sim: SimConfig,
    pub dataset: Option<PathBuf>,
    /// Generated dataset used when no path is given.
    pub synthetic: Option<SyntheticConfig>,
    pub out: PathBuf,
    pub sweep: SweepAxes,
    /// Algorithms run alongside `sim.algorithm` at every sweep point.
    pub baselines: Vec<Algorithm>,
    pub sweep_cap: usize,
    pub bound_estimate: BoundEstimate,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self::from_parts(SimConfig::default(), DriverPart::default())
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub algorithm: Option<Algorithm>,
    pub tau: Option<usize>,
    pub topology: Option<TopologyKind>,
    pub n_neighbors: Option<usize>,
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
}

/// One scheduled simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub index: usize,
    pub label: String,
    pub cfg: SimConfig,
}

impl RunPlan {
    pub fn file_stem(&self) -> String {
        format!("{:03}_{}", self.index, self.label)
    }
}

fn sim_keys() -> Vec<String> {
    match serde_json::to_value(SimConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn set_seed(cfg: &mut SimConfig, seed: u64) {
    cfg.seed = seed;
    cfg.partition.seed = seed;
    cfg.topology.seed = seed;
}

fn topology_name(kind: TopologyKind) -> &'static str {
    match kind {
        TopologyKind::Complete => "complete",
        TopologyKind::Ring => "ring",
        TopologyKind::Random => "random",
        TopologyKind::Isolated => "isolated",
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl ExperimentSpec {
    fn from_parts(sim: SimConfig, d: DriverPart) -> Self {
        Self {
            sim,
            dataset: d.dataset,
            synthetic: d.synthetic,
            out: d.out,
            sweep: d.sweep,
            baselines: d.baselines,
            sweep_cap: d.sweep_cap,
            bound_estimate: d.bound_estimate,
        }
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(map) = value else {
            return Err(CliError::Config(
                "experiment config must be a JSON object".into(),
            ));
        };
        let sim_keys = sim_keys();
        let mut sim = Map::new();
        let mut driver = Map::new();
        for (k, v) in map {
            if DRIVER_KEYS.contains(&k.as_str()) {
                driver.insert(k, v);
            } else if sim_keys.contains(&k) {
                sim.insert(k, v);
            } else {
                let mut valid: Vec<String> = sim_keys.clone();
                valid.extend(DRIVER_KEYS.iter().map(|s| s.to_string()));
                valid.sort();
                return Err(CliError::Config(format!(
                    "unknown key `{k}`; valid keys: {}",
                    valid.join(", ")
                )));
            }
        }
        let sim: SimConfig = serde_json::from_value(Value::Object(sim))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let driver: DriverPart = serde_json::from_value(Value::Object(driver))
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self::from_parts(sim, driver))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Flat JSON that parses back to the same spec.
    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.sim) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        let driver = DriverPart {
            dataset: self.dataset.clone(),
            synthetic: self.synthetic.clone(),
            out: self.out.clone(),
            sweep: self.sweep.clone(),
            baselines: self.baselines.clone(),
            sweep_cap: self.sweep_cap,
            bound_estimate: self.bound_estimate.clone(),
        };
        if let Ok(Value::Object(d)) = serde_json::to_value(driver) {
            map.extend(d);
        }
        Value::Object(map)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.dataset {
            self.dataset = Some(p.clone());
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(a) = o.algorithm {
            self.sim.algorithm = a;
        }
        if let Some(t) = o.tau {
            self.sim.tau = t;
        }
        if let Some(k) = o.topology {
            self.sim.topology.kind = k;
        }
        if let Some(n) = o.n_neighbors {
            self.sim.topology.n_neighbors = n;
        }
        if let Some(s) = o.seed {
            set_seed(&mut self.sim, s);
        }
        if let Some(r) = o.rounds {
            self.sim.rounds = r;
        }
    }

    pub fn algorithms(&self) -> Vec<Algorithm> {
        let mut out = vec![self.sim.algorithm];
        for &b in &self.baselines {
            if !out.contains(&b) {
                out.push(b);
            }
        }
        out
    }

    /// Number of runs the sweep schedules, or `None` on overflow.
    pub fn run_count(&self) -> Option<usize> {
        let s = &self.sweep;
        [
            s.tau.len(),
            s.lambda1.len(),
            s.topology.len(),
            s.n_neighbors.len(),
            s.seeds.len(),
            self.algorithms().len(),
        ]
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n.max(1)))
    }

    /// Cross product of the sweep axes, algorithms innermost. Every planned
    /// config is validated.
    pub fn plan(&self) -> Result<Vec<RunPlan>> {
        if self.sweep_cap == 0 {
            return Err(CliError::Config("sweep_cap must be at least 1".into()));
        }
        let count = self.run_count().unwrap_or(usize::MAX);
        if count > self.sweep_cap {
            return Err(CliError::Config(format!(
                "sweep schedules {count} runs, above the cap of {}",
                self.sweep_cap
            )));
        }
        let base = &self.sim;
        let s = &self.sweep;
        let mut plans = Vec::with_capacity(count);
        for tau in axis(&s.tau, base.tau) {
            for lambda1 in axis(&s.lambda1, base.mtl.lambda1) {
                for kind in axis(&s.topology, base.topology.kind) {
                    for n in axis(&s.n_neighbors, base.topology.n_neighbors) {
                        for seed in axis(&s.seeds, base.seed) {
                            for algo in self.algorithms() {
                                let mut cfg = base.clone();
                                cfg.algorithm = algo;
                                cfg.tau = tau;
                                cfg.mtl.lambda1 = lambda1;
                                cfg.topology.kind = kind;
                                cfg.topology.n_neighbors = n;
                                let mut label = vec![algo.name().to_string()];
                                if !s.tau.is_empty() {
                                    label.push(format!("tau{tau}"));
                                }
                                if !s.lambda1.is_empty() {
                                    label.push(format!("lambda{lambda1}"));
                                }
                                if !s.topology.is_empty() {
                                    label.push(topology_name(kind).to_string());
                                }
                                if !s.n_neighbors.is_empty() {
                                    label.push(format!("n{n}"));
                                }
                                if !s.seeds.is_empty() {
                                    set_seed(&mut cfg, seed);
                                    label.push(format!("seed{seed}"));
                                }
                                cfg.validate().map_err(|e| {
                                    CliError::Config(format!("{}: {e}", label.join("_")))
                                })?;
                                plans.push(RunPlan {
                                    index: plans.len(),
                                    label: label.join("_"),
                                    cfg,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(plans)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bound_estimate;
        if b.enabled && (b.probes == 0 || b.draws == 0 || !(b.radius > 0.0)) {
            return Err(CliError::Config(
                "bound_estimate needs probes ≥ 1, draws ≥ 1 and a positive radius".into(),
            ));
        }
        self.plan().map(|_| ())
    }
}
