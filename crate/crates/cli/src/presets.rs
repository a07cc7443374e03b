//! Named experiments.
//!
//! The figure presets share `d = 64`, `r = 16`, `m = 1024`, one negative,
//! seed 7 and 4096 Monte Carlo positives per step. Their learning rate and
//! horizons are larger than a cautious default: the signal columns of `K`
//! grow several-fold while aligning, which slows the relative balancing
//! rate, and `η = 0.5` over 3000 steps reaches `κ₀ ≈ 1` in under a minute.

use contrastive_dynamics::infinite_width::Temperature;
use contrastive_dynamics::model::SigmaPreset;
use contrastive_dynamics::training::{RecorderSpec, Schedule};
use contrastive_dynamics::{ExpectationStrategy, LossKind, ModelConfig, SigmaSpec};

use crate::error::{CliError, CliResult};
use crate::spec::{ExperimentSpec, IwJob};

pub const FIGURE_SEED: u64 = 7;
const FIGURE_ETA: f64 = 0.5;
const FIGURE_STEPS: u64 = 3000;
const FIGURE_SWITCH: u64 = 200;
const FIGURE_TAU0_SQ: f64 = 1e-4;

/// The three runs of the figure, in output order.
pub const FIGURE_RUNS: [&str; 3] = [
    "figure-noncontrastive",
    "figure-contrastive-constant",
    "figure-contrastive-switch",
];

pub const TRAIN_PRESETS: [&str; 6] = [
    "figure-noncontrastive",
    "figure-contrastive-constant",
    "figure-contrastive-switch",
    "adversarial",
    "adversarial-contrastive",
    "smoke",
];

pub const IW_PRESETS: [&str; 2] = ["iw-fixed-point", "iw-tracking"];

fn figure_model(signal_variances: SigmaSpec, signal_dim: usize) -> ModelConfig {
    let mut model = ModelConfig::flat(64, signal_dim, 1024, FIGURE_SEED);
    model.signal_variances = signal_variances;
    model.noise_variance = 0.5;
    // The spectra below sit well outside the `c ln d` envelope with c = 1.
    model.assumption_c = 100.0;
    model
}

/// `(ln d, 1, ..., 1)` on the 16 signal coordinates.
fn figure_sigma() -> SigmaSpec {
    let mut v = vec![1.0; 16];
    v[0] = 64f64.ln();
    SigmaSpec::Values(v)
}

fn switch_schedule(total_steps: u64) -> Schedule {
    Schedule {
        tau0_sq: FIGURE_TAU0_SQ,
        switch_step: FIGURE_SWITCH,
        ..Schedule::constant(FIGURE_ETA, total_steps)
    }
}

fn figure_spec(name: &str, model: ModelConfig, schedule: Schedule, loss_kind: LossKind) -> ExperimentSpec {
    ExperimentSpec {
        name: Some(name.to_owned()),
        model,
        schedule,
        loss_kind,
        strategy: ExpectationStrategy::monte_carlo(4096, 1),
        recorder: RecorderSpec {
            stride: 10,
            alignment_samples: 4096,
        },
        out: None,
    }
}

pub fn train_preset(name: &str) -> CliResult<ExperimentSpec> {
    let constant = Schedule::constant(FIGURE_ETA, FIGURE_STEPS);
    Ok(match name {
        "figure-noncontrastive" => figure_spec(
            name,
            figure_model(figure_sigma(), 16),
            constant,
            LossKind::NonContrastive,
        ),
        "figure-contrastive-constant" => {
            figure_spec(name, figure_model(figure_sigma(), 16), constant, LossKind::Contrastive)
        }
        "figure-contrastive-switch" => figure_spec(
            name,
            figure_model(figure_sigma(), 16),
            switch_schedule(FIGURE_STEPS),
            LossKind::Contrastive,
        ),
        "adversarial" => figure_spec(
            name,
            figure_model(SigmaSpec::Named(SigmaPreset::Adversarial), 64),
            constant,
            LossKind::NonContrastive,
        ),
        // The contrastive loss on the same spectrum balances, but needs a
        // longer horizon than the figure runs.
        "adversarial-contrastive" => figure_spec(
            name,
            figure_model(SigmaSpec::Named(SigmaPreset::Adversarial), 64),
            switch_schedule(4000),
            LossKind::Contrastive,
        ),
        "smoke" => ExperimentSpec {
            name: Some(name.to_owned()),
            model: ModelConfig {
                signal_variances: SigmaSpec::Values(vec![1.5, 1.0, 1.0]),
                noise_variance: 0.2,
                assumption_c: 10.0,
                ..ModelConfig::flat(6, 3, 8, 3)
            },
            schedule: Schedule::constant(0.2, 200),
            loss_kind: LossKind::Contrastive,
            strategy: ExpectationStrategy::exact(),
            recorder: RecorderSpec {
                stride: 1,
                alignment_samples: 4096,
            },
            out: None,
        },
        _ => return Err(unknown(name, &TRAIN_PRESETS)),
    })
}

pub fn iw_preset(name: &str) -> CliResult<IwJob> {
    Ok(match name {
        "iw-fixed-point" => IwJob::Ode {
            name: Some(name.to_owned()),
            sigma_sq: vec![1.0; 3],
            kappa_sq: vec![0.5; 3],
            hat_kappa_sq: vec![0.5; 3],
            negatives: 1.0,
            temperature: Temperature::Constant { tau_sq: 1.0 },
            step: 0.1,
            horizon: 20.0,
            out: None,
        },
        // Nearly noiseless and wide, so the finite K columns stay close to
        // orthogonal and the reduced ODE applies.
        "iw-tracking" => IwJob::Tracking {
            experiment: ExperimentSpec {
                name: Some(name.to_owned()),
                model: ModelConfig {
                    signal_variances: SigmaSpec::Values(vec![2.0, 1.5, 1.0, 1.0]),
                    noise_variance: 1e-4,
                    assumption_c: 100.0,
                    ..ModelConfig::flat(16, 4, 4096, 5)
                },
                schedule: Schedule::constant(0.1, 500),
                loss_kind: LossKind::Contrastive,
                strategy: ExpectationStrategy::monte_carlo(4096, 3),
                recorder: RecorderSpec {
                    stride: 1,
                    alignment_samples: 256,
                },
                out: None,
            },
        },
        _ => return Err(unknown(name, &IW_PRESETS)),
    })
}

fn unknown(name: &str, known: &[&str]) -> CliError {
    CliError::UnknownPreset {
        name: name.to_owned(),
        known: known.join(", "),
    }
}
