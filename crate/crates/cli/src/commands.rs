use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use fedmtl::bounds::{convergence_bound, BoundInputs};
use fedmtl::fedsim::Algorithm;
use fedmtl::graph::TaskType;
use fedmtl::synthetic::{generate, SyntheticConfig};
use fedmtl::topology::{self, MixingRule, TopologyKind};

use crate::error::{CliError, Result};
use crate::experiment::{comparison_table, run_experiment};
use crate::spec::{ExperimentSpec, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "fedmtl",
    version,
    about = "Serverless federated multi-task graph learning simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation or a sweep.
    Simulate(SimulateArgs),
    /// Evaluate the convergence bound and its step-size condition.
    Bounds(BoundsArgs),
    /// Print the mixing matrix spectrum of a topology.
    InspectTopology(TopologyArgs),
    /// Write a synthetic multi-task graph dataset as JSON.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON experiment config; omitted means all defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub algo: Option<Algorithm>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub topology: Option<TopologyKind>,
    #[arg(long)]
    pub n_neighbors: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long)]
    pub eta: f64,
    /// Smoothness constant.
    #[arg(long = "L")]
    pub l: f64,
    #[arg(long)]
    pub tau: u32,
    #[arg(long)]
    pub zeta: f64,
    #[arg(long)]
    pub sigma_sq: f64,
    /// Number of clients.
    #[arg(long = "K")]
    pub k: u32,
    /// Number of rounds.
    #[arg(long = "T")]
    pub t: u64,
    #[arg(long, default_value_t = 1.0)]
    pub f_init: f64,
    #[arg(long, default_value_t = 0.0)]
    pub f_inf: f64,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TopologyArgs {
    #[arg(long)]
    pub kind: TopologyKind,
    /// Number of clients.
    #[arg(long = "K")]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub n_neighbors: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use `1/|M_i|` weights instead of Metropolis-Hastings.
    #[arg(long)]
    pub uniform: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub graphs: usize,
    #[arg(long, default_value_t = 4)]
    pub tasks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub regression: bool,
}

impl SimulateArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.clone(),
            out: self.out.clone(),
            algorithm: self.algo,
            tau: self.tau,
            topology: self.topology,
            n_neighbors: self.n_neighbors,
            seed: self.seed,
            rounds: self.rounds,
        }
    }

    pub fn resolve(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::default(),
        };
        spec.apply(&self.overrides());
        Ok(spec)
    }
}

fn bounds(a: &BoundsArgs) -> Result<String> {
    let inputs = BoundInputs {
        eta: a.eta,
        lipschitz: a.l,
        tau: a.tau,
        zeta: a.zeta,
        sigma_sq: a.sigma_sq,
        clients: a.k,
        rounds: a.t,
        f_init: a.f_init,
        f_inf: a.f_inf,
        beta: 0.0,
    };
    let v = convergence_bound(&inputs)?;
    if a.json {
        return serde_json::to_string_pretty(&v).map_err(|e| CliError::Config(e.to_string()));
    }
    let mut s = String::new();
    let c = &v.lr_condition;
    match c.lhs {
        Some(lhs) => {
            let verdict = if c.feasible { "feasible" } else { "violated" };
            let _ = writeln!(s, "step-size condition: {lhs:.6e} <= 1 ({verdict})");
        }
        None => {
            let _ = writeln!(
                s,
                "step-size condition: {}",
                c.reason.as_deref().unwrap_or("undefined")
            );
        }
    }
    match (v.value, v.terms) {
        (Some(b), Some([opt, noise, net])) => {
            let _ = writeln!(s, "bound: {b:.6e}");
            let _ = writeln!(
                s,
                "  optimization {opt:.6e}  noise {noise:.6e}  network {net:.6e}"
            );
        }
        _ => {
            let _ = writeln!(s, "bound: undefined for zeta = 1");
        }
    }
    Ok(s)
}

fn inspect_topology(a: &TopologyArgs) -> Result<String> {
    let conn = topology::build_topology(a.kind, a.k, a.n_neighbors, a.seed)?;
    let rule = if a.uniform {
        MixingRule::Uniform
    } else {
        MixingRule::MetropolisHastings
    };
    let mix = topology::mixing_matrix(&conn, rule);
    let gap = topology::spectral_gap(&mix, Some(&conn))?;
    let mut s = format!("zeta {:.12}\n", gap.zeta);
    let _ = writeln!(s, "connected {}", gap.connected);
    let degrees: Vec<String> = (0..conn.size())
        .map(|i| conn.degree(i).to_string())
        .collect();
    let _ = writeln!(s, "degrees {}", degrees.join(" "));
    let eig: Vec<String> = gap.eigenvalues.iter().map(|v| format!("{v:.6}")).collect();
    let _ = writeln!(s, "eigenvalues {}", eig.join(" "));
    if let Some(w) = gap.warning {
        let _ = writeln!(s, "warning {w}");
    }
    Ok(s)
}

fn synth(a: &SynthArgs) -> Result<String> {
    let cfg = SyntheticConfig {
        num_graphs: a.graphs,
        num_tasks: a.tasks,
        seed: a.seed,
        task_type: if a.regression {
            TaskType::Regression
        } else {
            TaskType::Classification
        },
        ..Default::default()
    };
    let ds = generate(&cfg)?;
    std::fs::write(&a.out, ds.to_json()?).map_err(|e| CliError::io(&a.out, e))?;
    Ok(format!(
        "wrote {} graphs to {}\n",
        ds.len(),
        a.out.display()
    ))
}

/// Executes a parsed command and returns what it prints on success.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Simulate(a) => {
            let spec = a.resolve()?;
            let summary = run_experiment(&spec)?;
            Ok(comparison_table(&summary))
        }
        Command::Bounds(a) => bounds(a),
        Command::InspectTopology(a) => inspect_topology(a),
        Command::Synth(a) => synth(a),
    }
}
