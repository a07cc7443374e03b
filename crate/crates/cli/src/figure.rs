//! The `figure` subcommand: the three figure presets under one seed.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use contrastive_dynamics::metrics::MetricsRecord;
use contrastive_dynamics::training::Trajectory;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{create_dir, float, write_json, Table};
use crate::presets::{train_preset, FIGURE_RUNS};
use crate::spec::{ExperimentSpec, Overrides, SCHEMA_VERSION};
use crate::train::train;

pub const FIGURE_CSV: &str = "figure.csv";
pub const FIGURE_SUMMARY_JSON: &str = "figure_summary.json";

pub const ALIGNED: f64 = 0.99;
pub const BALANCED_KAPPA0: f64 = 1.2;
/// The two-phase check: `ρ_−` must drop below this ...
pub const ALIGN_RHO: f64 = 0.01;
/// ... strictly before `κ₀` drops below this.
pub const BALANCE_ONSET_KAPPA0: f64 = 1.5;

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub spec_hash: String,
    pub final_step: u64,
    pub final_metrics: MetricsRecord,
    /// First recorded step with `ρ_− < 0.01`.
    pub aligned_at: Option<u64>,
    /// First recorded step with `κ₀ < 1.5`.
    pub balancing_at: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FigureChecks {
    pub all_aligned: bool,
    pub contrastive_balanced: bool,
    pub noncontrastive_unbalanced: bool,
    pub constant_temperature_two_phase: bool,
}

impl FigureChecks {
    pub fn all(&self) -> bool {
        self.all_aligned
            && self.contrastive_balanced
            && self.noncontrastive_unbalanced
            && self.constant_temperature_two_phase
    }
}

#[derive(Debug, Serialize)]
pub struct FigureSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub runs: Vec<RunSummary>,
    pub checks: FigureChecks,
}

fn summarize(spec: &ExperimentSpec, traj: &Trajectory) -> CliResult<RunSummary> {
    let last = traj
        .records
        .last()
        .ok_or_else(|| CliError::Usage(format!("{} recorded nothing", spec.display_name())))?;
    let first = |pred: &dyn Fn(&MetricsRecord) -> bool| {
        traj.records.iter().find(|r| pred(&r.metrics)).map(|r| r.step)
    };
    Ok(RunSummary {
        name: spec.display_name().to_owned(),
        spec_hash: spec.hash(),
        final_step: last.step,
        final_metrics: last.metrics.clone(),
        aligned_at: first(&|m| m.rho_minus < ALIGN_RHO),
        balancing_at: first(&|m| m.kappa0 < BALANCE_ONSET_KAPPA0),
    })
}

/// Evaluates the qualitative claims on runs given in [`FIGURE_RUNS`] order.
pub fn checks(runs: &[RunSummary]) -> FigureChecks {
    let [plain, constant, switch] = runs else {
        panic!("expected the three figure runs");
    };
    FigureChecks {
        all_aligned: runs.iter().all(|r| r.final_metrics.gamma_align >= ALIGNED),
        contrastive_balanced: [constant, switch]
            .iter()
            .all(|r| r.final_metrics.kappa0 <= BALANCED_KAPPA0),
        noncontrastive_unbalanced: plain.final_metrics.kappa0 > BALANCED_KAPPA0,
        constant_temperature_two_phase: matches!(
            (constant.aligned_at, constant.balancing_at),
            (Some(a), Some(b)) if a < b
        ),
    }
}

/// Top-`r` singular values of the feature map, `sqrt` of the `Σ_f` spectrum.
fn figure_table(specs: &[ExperimentSpec], trajectories: &[Trajectory]) -> Table {
    let r = specs.iter().map(|s| s.model.signal_dim).max().unwrap_or(0);
    let mut header: Vec<String> = ["run", "step", "t", "tau_sq", "gamma_align", "kappa0", "rho_minus"]
        .map(String::from)
        .to_vec();
    header.extend((1..=r).map(|i| format!("sv_{i}")));
    let mut table = Table::new(header);
    for (spec, traj) in specs.iter().zip(trajectories) {
        for rec in &traj.records {
            let m = &rec.metrics;
            let mut row = vec![
                spec.display_name().to_owned(),
                rec.step.to_string(),
                float(rec.step as f64 * spec.schedule.eta),
                float(rec.tau_sq),
                float(m.gamma_align),
                float(m.kappa0),
                float(m.rho_minus),
            ];
            row.extend((0..r).map(|i| float(m.sigma_f_top.get(i).copied().unwrap_or(0.0).sqrt())));
            table.push(row);
        }
    }
    table
}

/// Runs `specs` on up to `jobs` threads; results keep the input order.
fn run_all(specs: &[ExperimentSpec], dirs: &[PathBuf], jobs: usize) -> Vec<CliResult<Trajectory>> {
    let slots: Vec<Mutex<Option<CliResult<Trajectory>>>> = specs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, specs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= specs.len() {
                    break;
                }
                eprintln!("running {}", specs[i].display_name());
                let result = train(&specs[i], &dirs[i]);
                *slots[i].lock().expect("no worker panics while holding a slot") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("workers finished").expect("every slot was filled"))
        .collect()
}

pub fn figure(seed: u64, overrides: &Overrides, jobs: usize, root: &Path) -> CliResult<FigureSummary> {
    let mut specs = Vec::new();
    for name in FIGURE_RUNS {
        let mut spec = train_preset(name)?;
        overrides.apply(&mut spec)?;
        spec.model.seed = seed;
        spec.validate()?;
        specs.push(spec);
    }
    create_dir(root)?;
    let dirs: Vec<PathBuf> = specs.iter().map(|s| root.join(s.display_name())).collect();
    let mut trajectories = Vec::new();
    for result in run_all(&specs, &dirs, jobs) {
        trajectories.push(result?);
    }
    figure_table(&specs, &trajectories).write(&root.join(FIGURE_CSV))?;
    let runs = specs
        .iter()
        .zip(&trajectories)
        .map(|(s, t)| summarize(s, t))
        .collect::<CliResult<Vec<_>>>()?;
    let summary = FigureSummary {
        schema_version: SCHEMA_VERSION,
        seed,
        checks: checks(&runs),
        runs,
    };
    write_json(&root.join(FIGURE_SUMMARY_JSON), &summary)?;
    Ok(summary)
}
