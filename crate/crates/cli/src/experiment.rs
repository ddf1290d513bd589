//! Runs a planned sweep and writes its outputs.
//!
//! Files land in the output directory with a `.partial` suffix and are
//! renamed once every run has finished. A failing run leaves the partial
//! files in place, including a summary that records the error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use fedmtl::bounds::{compare_trace, convergence_bound, BoundInputs, BoundValue, TraceComparison};
use fedmtl::fedsim::{self, estimate, SimConfig, Simulation};
use fedmtl::graph::{load_dataset, Dataset, Metric, TaskType};
use fedmtl::synthetic::generate;

use crate::error::{CliError, Result};
use crate::spec::{BoundEstimate, ExperimentSpec, RunPlan};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVES_FILE: &str = "curves.tsv";
pub const PARTIAL: &str = ".partial";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: Option<BoundInputs>,
    pub value: Option<BoundValue>,
    pub trace: Option<TraceComparison>,
    /// Why the bound could not be evaluated.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub index: usize,
    pub label: String,
    pub metrics_file: String,
    pub config: SimConfig,
    pub final_mean: Option<f64>,
    pub zeta: f64,
    pub connected: bool,
    pub initial_objective: f64,
    pub sample_counts: Vec<usize>,
    pub task_sets: Vec<Vec<usize>>,
    pub bound: Option<BoundReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub task_type: TaskType,
    pub metric: Metric,
    pub num_tasks: usize,
    pub d_input: usize,
    pub num_samples: usize,
}

impl DatasetInfo {
    fn of(ds: &Dataset) -> Self {
        let m = &ds.manifest;
        Self {
            name: m.name.clone(),
            task_type: m.task_type,
            metric: m.metric,
            num_tasks: m.num_tasks,
            d_input: m.d_input,
            num_samples: ds.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    /// Flat config echo; parses back as an experiment spec.
    pub spec: Value,
    pub dataset: DatasetInfo,
    pub runs: Vec<RunOutcome>,
    pub complete: bool,
    pub error: Option<String>,
}

pub fn load_spec_dataset(spec: &ExperimentSpec) -> Result<Dataset> {
    match (&spec.dataset, &spec.synthetic) {
        (Some(path), _) => Ok(load_dataset(path)?),
        (None, Some(syn)) => Ok(generate(syn)?),
        (None, None) => Err(CliError::Config(
            "no dataset: pass --dataset or set `dataset` or `synthetic` in the config".into(),
        )),
    }
}

fn bound_report(
    sim: &Simulation,
    summary: &fedsim::RunSummary,
    l: f64,
    sigma_sq: f64,
) -> BoundReport {
    let cfg = &sim.cfg;
    let inputs = BoundInputs {
        eta: cfg.eta,
        lipschitz: l,
        tau: cfg.tau.min(u32::MAX as usize) as u32,
        zeta: summary.zeta.clamp(0.0, 1.0),
        sigma_sq,
        clients: sim.clients.len() as u32,
        rounds: cfg.rounds as u64,
        f_init: summary.initial_objective,
        f_inf: 0.0,
        beta: 0.0,
    };
    let value = match convergence_bound(&inputs) {
        Ok(v) => v,
        Err(e) => {
            return BoundReport {
                inputs: Some(inputs),
                value: None,
                trace: None,
                note: Some(e.to_string()),
            }
        }
    };
    let trace: Vec<f64> = summary
        .records
        .iter()
        .filter_map(|r| r.grad_norm_sq)
        .collect();
    let (trace, note) = if trace.is_empty() {
        (None, Some("gradient norm not tracked".to_string()))
    } else {
        match compare_trace(&trace, &inputs) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    BoundReport {
        inputs: Some(inputs),
        value: Some(value),
        trace,
        note,
    }
}

fn run_one(
    plan: &RunPlan,
    dataset: &Dataset,
    est: &BoundEstimate,
) -> fedmtl::Result<(fedsim::RunSummary, Option<BoundReport>)> {
    let mut sim = Simulation::new(plan.cfg.clone(), dataset)?;
    // estimates are taken at initialization
    let estimates = if est.enabled {
        Some((
            estimate::estimate_lipschitz(&sim, est.probes, est.radius)?,
            estimate::estimate_sigma_sq(&sim, est.draws)?,
        ))
    } else {
        None
    };
    let summary = sim.run()?;
    let bound = estimates.map(|(l, s)| bound_report(&sim, &summary, l, s));
    Ok((summary, bound))
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(PARTIAL);
    PathBuf::from(s)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
    curves: String,
}

impl Outputs {
    fn put(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let target = self.dir.join(name);
        write(&partial(&target), contents)?;
        self.written.push(target);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        for target in &self.written {
            let from = partial(target);
            fs::rename(&from, target).map_err(|e| CliError::io(&from, e))?;
        }
        Ok(())
    }
}

/// Runs every planned simulation in order and writes one metrics CSV per
/// run, `summary.json` and `curves.tsv`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentSummary> {
    spec.validate()?;
    let plans = spec.plan()?;
    let dataset = load_spec_dataset(spec)?;
    fs::create_dir_all(&spec.out).map_err(|e| CliError::io(&spec.out, e))?;
    let mut out = Outputs {
        dir: spec.out.clone(),
        written: Vec::new(),
        curves: "run\talgorithm\tround\tmetric\n".to_string(),
    };
    let mut summary = ExperimentSummary {
        spec: spec.to_value(),
        dataset: DatasetInfo::of(&dataset),
        runs: Vec::with_capacity(plans.len()),
        complete: false,
        error: None,
    };
    let mut failure = None;
    for plan in &plans {
        log::info!("run {} ({}/{})", plan.label, plan.index + 1, plans.len());
        let (result, bound) = match run_one(plan, &dataset, &spec.bound_estimate) {
            Ok(r) => r,
            Err(source) => {
                failure = Some(CliError::Run {
                    label: plan.label.clone(),
                    source,
                });
                break;
            }
        };
        let csv_name = format!("{}.csv", plan.file_stem());
        out.put(
            &csv_name,
            fedsim::metrics_csv_string(&result.records)?.as_bytes(),
        )?;
        for r in &result.records {
            let _ = writeln!(
                out.curves,
                "{}\t{}\t{}\t{}",
                plan.label,
                plan.cfg.algorithm.name(),
                r.round,
                fmt_opt(r.mean)
            );
        }
        summary.runs.push(RunOutcome {
            index: plan.index,
            label: plan.label.clone(),
            metrics_file: csv_name,
            config: plan.cfg.clone(),
            final_mean: result.final_mean,
            zeta: result.zeta,
            connected: result.connected,
            initial_objective: result.initial_objective,
            sample_counts: result.sample_counts,
            task_sets: result.task_sets,
            bound,
        });
    }
    summary.complete = failure.is_none();
    summary.error = failure.as_ref().map(|e| e.to_string());
    let json =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))?;
    let curves = std::mem::take(&mut out.curves);
    out.put(SUMMARY_FILE, json.as_bytes())?;
    out.put(CURVES_FILE, curves.as_bytes())?;
    match failure {
        Some(e) => Err(e),
        None => {
            out.finish()?;
            Ok(summary)
        }
    }
}

/// Plain-text table of final metrics, one row per run.
pub fn comparison_table(summary: &ExperimentSummary) -> String {
    let width = summary
        .runs
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(3)
        .max(3);
    let mut s = format!(
        "{:<width$}  {:>10}  {:>8}  {:>12}\n",
        "run", "metric", "zeta", "bound"
    );
    for r in &summary.runs {
        let bound = r
            .bound
            .as_ref()
            .and_then(|b| b.value.as_ref())
            .and_then(|v| v.value)
            .map(|v| format!("{v:.4e}"))
            .unwrap_or_else(|| "-".into());
        let metric = r
            .final_mean
            .map(|m| format!("{m:.4}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<width$}  {:>10}  {:>8.4}  {:>12}",
            r.label, metric, r.zeta, bound
        );
    }
    s
}
