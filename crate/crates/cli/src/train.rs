//! The `train` subcommand.

use std::path::Path;

use contrastive_dynamics::metrics::MetricsRecord;
use contrastive_dynamics::training::{
    run, stage_boundary_report, RunError, StageThresholds, Termination, Trajectory,
};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{create_dir, float, write_json, Table};
use crate::spec::{ExperimentSpec, SCHEMA_VERSION};

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const STAGE_REPORT_JSON: &str = "stage_report.json";

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub schema_version: u32,
    pub spec_hash: String,
    pub spec: &'a ExperimentSpec,
    /// `None` when the run diverged.
    pub termination: Option<Termination>,
    pub diverged_at: Option<u64>,
    pub records: usize,
    pub final_step: Option<u64>,
    pub final_loss: Option<f64>,
    pub final_metrics: Option<&'a MetricsRecord>,
    pub warnings: Vec<String>,
}

/// Trajectory rows with `t = step · η`, the continuous time of the flow.
pub fn trajectory_table(trajectory: &Trajectory, eta: f64) -> Table {
    let spectrum = trajectory
        .records
        .first()
        .map_or(0, |r| r.metrics.sigma_f_top.len());
    let mut header: Vec<String> = [
        "step",
        "t",
        "tau_sq",
        "loss",
        "grad_norm",
        "gamma_align",
        "gamma_balance",
        "kappa0",
        "rho_minus",
        "rho_ns",
        "rho_hat_ns",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=spectrum).map(|i| format!("sigma_f_{i}")));
    let mut table = Table::new(header);
    for rec in &trajectory.records {
        let m = &rec.metrics;
        let mut row = vec![
            rec.step.to_string(),
            float(rec.step as f64 * eta),
            float(rec.tau_sq),
            float(rec.loss),
            float(rec.grad_norm),
            float(m.gamma_align),
            float(m.gamma_balance),
            float(m.kappa0),
            float(m.rho_minus),
            float(m.rho_ns),
            float(m.rho_hat_ns),
        ];
        row.extend(m.sigma_f_top.iter().map(|x| float(*x)));
        table.push(row);
    }
    table
}

fn write_artifacts(
    spec: &ExperimentSpec,
    dir: &Path,
    trajectory: &Trajectory,
    termination: Option<Termination>,
    diverged_at: Option<u64>,
    warnings: Vec<String>,
) -> CliResult<()> {
    trajectory_table(trajectory, spec.schedule.eta).write(&dir.join(TRAJECTORY_CSV))?;
    let last = trajectory.records.last();
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        spec_hash: spec.hash(),
        spec,
        termination,
        diverged_at,
        records: trajectory.records.len(),
        final_step: last.map(|r| r.step),
        final_loss: last.map(|r| r.loss),
        final_metrics: last.map(|r| &r.metrics),
        warnings,
    };
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    if !trajectory.records.is_empty() {
        let report = stage_boundary_report(trajectory, StageThresholds::default())?;
        write_json(&dir.join(STAGE_REPORT_JSON), &report)?;
    }
    Ok(())
}

/// Runs `spec` and writes its artifacts into `dir`.
///
/// Collapse and divergence still write whatever was recorded before
/// returning an error.
pub fn train(spec: &ExperimentSpec, dir: &Path) -> CliResult<Trajectory> {
    let warnings = spec.validate()?;
    create_dir(dir)?;
    match run(&spec.model, &spec.schedule, spec.loss_kind, &spec.strategy, &spec.recorder) {
        Ok(trajectory) => {
            write_artifacts(spec, dir, &trajectory, Some(trajectory.termination), None, warnings)?;
            match trajectory.termination {
                Termination::Collapsed { step } => Err(CliError::Collapsed { step }),
                _ => Ok(trajectory),
            }
        }
        Err(RunError::Divergence { step, trajectory, .. }) => {
            write_artifacts(spec, dir, &trajectory, None, Some(step), warnings)?;
            Err(CliError::Diverged { step })
        }
        Err(RunError::Model(e)) => Err(e.into()),
    }
}
