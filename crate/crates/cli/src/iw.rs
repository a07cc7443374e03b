//! The `iw` subcommand: the infinite-width ODE on its own or against a
//! finite-width run started from the same `(κ², κ̂²)`.

use std::path::Path;

use contrastive_dynamics::infinite_width::{
    convergence_order, integrate_iw, InfiniteWidthState, IwTrajectory, Temperature,
};
use contrastive_dynamics::lemma_checks::measured_state;
use contrastive_dynamics::metrics::DiagnosticsRecord;
use contrastive_dynamics::LossKind;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::output::{create_dir, float, write_json, Table};
use crate::spec::{IwJob, SCHEMA_VERSION};
use crate::train::train;

pub const IW_CSV: &str = "iw_trajectory.csv";
pub const IW_SUMMARY_JSON: &str = "iw_summary.json";

/// Gap and diagnostic level at which tracking counts as successful.
pub const TRACKING_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Serialize)]
pub struct TrackingSummary {
    /// Largest relative gap in `κ²` over rows whose diagnostic is within tolerance.
    pub max_rel_gap_kappa_sq: f64,
    /// Same for `κ̂²`.
    pub max_rel_gap_hat_kappa_sq: f64,
    pub max_signal_diagnostic: f64,
    pub rows_within_diagnostic: usize,
    pub rows: usize,
    pub tracked: bool,
}

#[derive(Debug, Serialize)]
pub struct IwSummary<'a> {
    pub schema_version: u32,
    pub spec_hash: String,
    pub job: &'a IwJob,
    pub halvings: u32,
    pub final_state: InfiniteWidthState,
    pub convergence_order: Option<f64>,
    pub tracking: Option<TrackingSummary>,
}

pub struct IwOutcome {
    pub trajectory: IwTrajectory,
    pub order: Option<f64>,
    pub tracking: Option<TrackingSummary>,
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

fn ode_table(traj: &IwTrajectory) -> Table {
    let r = traj.states.first().map_or(0, InfiniteWidthState::dim);
    let mut header: Vec<String> = ["t", "tau_sq", "s_tilde", "t_tilde"].map(String::from).to_vec();
    header.extend(indexed("kappa_sq", r));
    header.extend(indexed("hat_kappa_sq", r));
    let mut table = Table::new(header);
    for (i, s) in traj.states.iter().enumerate() {
        let mut row = vec![
            float(traj.times[i]),
            float(traj.tau_sq[i]),
            float(traj.s_tilde[i]),
            float(traj.t_tilde[i]),
        ];
        row.extend(s.kappa_sq.iter().chain(&s.hat_kappa_sq).map(|x| float(*x)));
        table.push(row);
    }
    table
}

fn relative_gap(finite: &[f64], limit: &[f64]) -> f64 {
    finite
        .iter()
        .zip(limit)
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max)
}

pub fn run_iw(job: &IwJob, dir: &Path, with_order: bool) -> CliResult<IwOutcome> {
    create_dir(dir)?;
    let outcome = match job {
        IwJob::Ode {
            sigma_sq,
            kappa_sq,
            hat_kappa_sq,
            negatives,
            temperature,
            step,
            horizon,
            ..
        } => {
            let s0 = InfiniteWidthState::new(kappa_sq.clone(), hat_kappa_sq.clone())?;
            let trajectory = integrate_iw(&s0, sigma_sq, *negatives, *temperature, *step, *horizon)?;
            ode_table(&trajectory).write(&dir.join(IW_CSV))?;
            let order = with_order
                .then(|| convergence_order(&s0, sigma_sq, *negatives, *temperature, *step, *horizon))
                .transpose()?;
            IwOutcome {
                trajectory,
                order,
                tracking: None,
            }
        }
        IwJob::Tracking { experiment } => {
            if experiment.loss_kind != LossKind::Contrastive {
                return Err(CliError::Usage(
                    "tracking compares against the contrastive flow; set loss_kind to contrastive".into(),
                ));
            }
            let finite = train(experiment, dir)?;
            let sigma_sq = experiment.model.sigma_sq()?;
            let negatives = experiment.model.negatives;
            let schedule = &experiment.schedule;
            let eta = schedule.eta;
            if eta == 0.0 {
                return Err(CliError::Usage("tracking needs a positive learning rate".into()));
            }
            let temperature = if schedule.switch_step == 0 {
                Temperature::Constant { tau_sq: 1.0 }
            } else {
                Temperature::Switch {
                    tau0_sq: schedule.tau0_sq,
                    switch_time: schedule.switch_step as f64 * eta,
                }
            };
            let snapshots: Vec<_> = finite
                .records
                .iter()
                .filter_map(|r| r.snapshot.as_ref().map(|k| (r, k)))
                .collect();
            let Some((first, k0)) = snapshots.first() else {
                return Err(CliError::Usage("the run recorded no snapshots".into()));
            };
            let s0 = measured_state(k0)?;
            let last_step = snapshots.last().map_or(first.step, |(r, _)| r.step);
            let horizon = (last_step - first.step) as f64 * eta;
            // One ODE step per gradient step keeps the grids aligned.
            let trajectory = integrate_iw(&s0, &sigma_sq, negatives, temperature, eta, horizon)?;
            let r = s0.dim();
            let mut header: Vec<String> = ["step", "t", "tau_sq"].map(String::from).to_vec();
            header.extend(indexed("kappa_sq", r));
            header.extend(indexed("iw_kappa_sq", r));
            header.extend(indexed("hat_kappa_sq", r));
            header.extend(indexed("iw_hat_kappa_sq", r));
            header.extend(["signal_diagnostic", "max_rel_gap"].map(String::from));
            let mut table = Table::new(header);
            let mut summary = TrackingSummary {
                max_rel_gap_kappa_sq: 0.0,
                max_rel_gap_hat_kappa_sq: 0.0,
                max_signal_diagnostic: 0.0,
                rows_within_diagnostic: 0,
                rows: 0,
                tracked: false,
            };
            for (rec, k) in &snapshots {
                let measured = measured_state(k)?;
                let limit = &trajectory.states[(rec.step - first.step) as usize];
                let diagnostic = DiagnosticsRecord::signal_max(k)?;
                let gap_k = relative_gap(&measured.kappa_sq, &limit.kappa_sq);
                let gap_h = relative_gap(&measured.hat_kappa_sq, &limit.hat_kappa_sq);
                summary.rows += 1;
                summary.max_signal_diagnostic = summary.max_signal_diagnostic.max(diagnostic);
                if diagnostic <= TRACKING_TOLERANCE {
                    summary.rows_within_diagnostic += 1;
                    summary.max_rel_gap_kappa_sq = summary.max_rel_gap_kappa_sq.max(gap_k);
                    summary.max_rel_gap_hat_kappa_sq = summary.max_rel_gap_hat_kappa_sq.max(gap_h);
                }
                let mut row = vec![rec.step.to_string(), float(rec.step as f64 * eta), float(rec.tau_sq)];
                for v in [
                    &measured.kappa_sq,
                    &limit.kappa_sq,
                    &measured.hat_kappa_sq,
                    &limit.hat_kappa_sq,
                ] {
                    row.extend(v.iter().map(|x| float(*x)));
                }
                row.push(float(diagnostic));
                row.push(float(gap_k.max(gap_h)));
                table.push(row);
            }
            table.write(&dir.join(IW_CSV))?;
            summary.tracked = summary.rows_within_diagnostic == summary.rows
                && summary.max_rel_gap_kappa_sq <= TRACKING_TOLERANCE;
            let order = with_order
                .then(|| convergence_order(&s0, &sigma_sq, negatives, temperature, eta, horizon))
                .transpose()?;
            IwOutcome {
                trajectory,
                order,
                tracking: Some(summary),
            }
        }
    };
    let summary = IwSummary {
        schema_version: SCHEMA_VERSION,
        spec_hash: job.hash(),
        job,
        halvings: outcome.trajectory.halvings,
        final_state: outcome.trajectory.last().clone(),
        convergence_order: outcome.order,
        tracking: outcome.tracking.clone(),
    };
    write_json(&dir.join(IW_SUMMARY_JSON), &summary)?;
    Ok(outcome)
}
