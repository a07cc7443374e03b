//! Command-line front end for `contrastive-dynamics`: experiment specs,
//! presets, and the `train`, `iw`, `verify` and `figure` subcommands.
//!
//! Every subcommand is also callable as a library function so that tests
//! can drive it in-process.

pub mod error;
pub mod figure;
pub mod iw;
pub mod output;
pub mod presets;
pub mod spec;
pub mod train;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use contrastive_dynamics::lemma_checks::FittedConstants;

pub use error::{CliError, CliResult};
use output::resolve_out_dir;
use spec::{read_json, ExperimentSpec, IwJob, Overrides};

#[derive(Debug, Parser)]
#[command(name = "contrastive-dynamics", version, about = "Simulate contrastive dual-encoder training dynamics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the commands that train.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Seed of the model (encoders, weights).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Record metrics every this many steps.
    #[arg(long)]
    pub stride: Option<u64>,
    /// Total number of steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Evaluate expectations by exact enumeration.
    #[arg(long, conflicts_with = "mc")]
    pub exact: bool,
    /// Evaluate expectations with N Monte Carlo positives per step.
    #[arg(long, value_name = "N")]
    pub mc: Option<u64>,
    /// Seed of the Monte Carlo sample streams.
    #[arg(long)]
    pub mc_seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl RunFlags {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            eta: self.eta,
            stride: self.stride,
            steps: self.steps,
            exact: self.exact,
            mc: self.mc,
            mc_seed: self.mc_seed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run gradient descent and write trajectory.csv, summary.json and stage_report.json.
    Train {
        /// Experiment spec (JSON).
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        spec: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Integrate the infinite-width ODE, optionally against a finite-width run.
    Iw {
        /// Infinite-width job (JSON).
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        spec: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Also estimate the integrator's order by step halving.
        #[arg(long)]
        order: bool,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the audit battery; exit 0 iff every audit passes.
    Verify {
        /// Comma-separated audit names.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Fitted constants (JSON) replacing the built-in values.
        #[arg(long, value_name = "FILE")]
        constants: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run the three figure presets with a shared seed.
    Figure {
        /// Number of runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn load_train(spec: Option<PathBuf>, preset: Option<String>) -> CliResult<ExperimentSpec> {
    match (spec, preset) {
        (Some(path), None) => ExperimentSpec::load(&path),
        (None, Some(name)) => presets::train_preset(&name),
        _ => Err(CliError::Usage("give either a spec file or --preset".into())),
    }
}

fn load_iw(spec: Option<PathBuf>, preset: Option<String>) -> CliResult<IwJob> {
    match (spec, preset) {
        (Some(path), None) => IwJob::load(&path),
        (None, Some(name)) => presets::iw_preset(&name),
        _ => Err(CliError::Usage("give either a job file or --preset".into())),
    }
}

/// Executes one parsed command line. Progress goes to stderr.
pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { spec, preset, flags } => {
            let mut spec = load_train(spec, preset)?;
            flags.overrides().apply(&mut spec)?;
            let dir = resolve_out_dir(flags.out.as_deref(), spec.out.as_deref(), spec.display_name());
            let traj = train::train(&spec, &dir)?;
            if let Some(last) = traj.records.last() {
                let m = &last.metrics;
                eprintln!(
                    "step {}: loss {:.6}, align {:.4}, balance {:.3}, kappa0 {:.4}",
                    last.step, last.loss, m.gamma_align, m.gamma_balance, m.kappa0
                );
            }
            eprintln!("wrote {}", dir.display());
        }
        Command::Iw {
            spec,
            preset,
            order,
            flags,
        } => {
            let mut job = load_iw(spec, preset)?;
            if let IwJob::Tracking { experiment } = &mut job {
                flags.overrides().apply(experiment)?;
            } else if flags.overrides() != Overrides::default() {
                return Err(CliError::Usage("training flags apply only to tracking jobs".into()));
            }
            let dir = resolve_out_dir(flags.out.as_deref(), job.out(), job.display_name());
            let outcome = iw::run_iw(&job, &dir, order)?;
            match outcome.order {
                Some(order) if order.is_finite() => eprintln!("observed order of convergence {order:.3}"),
                Some(_) => eprintln!("order of convergence undefined: the step-halving differences vanish"),
                None => {}
            }
            if let Some(t) = &outcome.tracking {
                eprintln!(
                    "max relative gap {:.3e} (kappa_sq), {:.3e} (hat); max diagnostic {:.3e}",
                    t.max_rel_gap_kappa_sq, t.max_rel_gap_hat_kappa_sq, t.max_signal_diagnostic
                );
            }
            eprintln!("wrote {}", dir.display());
        }
        Command::Verify { only, constants, out } => {
            let constants: FittedConstants = match constants {
                Some(path) => read_json(&path)?,
                None => FittedConstants::default(),
            };
            verify::check_filter(&only)?;
            let dir = resolve_out_dir(out.as_deref(), None, "verify");
            let report = verify::verify(&only, &constants, &dir)?;
            for a in &report.audits {
                eprintln!(
                    "{:<8} {} (error {:.3e}, budget {:.3e})",
                    format!("{:?}", a.verdict).to_lowercase(),
                    a.lemma,
                    a.error,
                    a.budget
                );
            }
            eprintln!("wrote {}", dir.display());
            if !report.all_pass() {
                return Err(CliError::AuditsFailed {
                    failed: report.failed,
                    total: report.audits.len(),
                });
            }
        }
        Command::Figure { jobs, flags } => {
            let seed = flags.seed.unwrap_or(presets::FIGURE_SEED);
            let overrides = Overrides {
                seed: None,
                ..flags.overrides()
            };
            let dir = resolve_out_dir(flags.out.as_deref(), None, "figure");
            let summary = figure::figure(seed, &overrides, jobs, &dir)?;
            for r in &summary.runs {
                eprintln!(
                    "{}: align {:.4}, kappa0 {:.4}",
                    r.name, r.final_metrics.gamma_align, r.final_metrics.kappa0
                );
            }
            eprintln!("checks: {:?}", summary.checks);
            eprintln!("wrote {}", dir.display());
        }
    }
    Ok(())
}
