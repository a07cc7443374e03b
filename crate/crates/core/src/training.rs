//! Discretized gradient descent on either loss with a two-phase temperature.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::expectation::{
    non_contrastive_loss_closed_form, population_moments, ExpectationStrategy, LossKind,
    MomentRequest,
};
use crate::gradients::{descent_from_qset, non_contrastive_qset, qset_from_moments, GradientPair};
use crate::metrics::{metrics, MetricsRecord};
use crate::model::{
    build_encoders, compute_kstate, init_weights, rng_for, EncoderSet, KState, ModelConfig, Stream,
    WeightState,
};

pub const DEFAULT_STOP_GRAD_NORM: f64 = 1e-8;

/// Samples per step: the full population or a fresh batch of positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Population,
    Size(u64),
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Population => serializer.serialize_str("population"),
            BatchSize::Size(n) => serializer.serialize_u64(*n),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Size(u64),
            Name(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Size(0) => Err(serde::de::Error::custom("batch size must be positive")),
            Raw::Size(n) => Ok(BatchSize::Size(n)),
            Raw::Name(s) if s == "population" => Ok(BatchSize::Population),
            Raw::Name(s) => Err(serde::de::Error::custom(alloc::format!(
                "expected a positive integer or \"population\", got {s:?}"
            ))),
        }
    }
}

fn default_stop() -> f64 {
    DEFAULT_STOP_GRAD_NORM
}

fn default_batch() -> BatchSize {
    BatchSize::Population
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub eta: f64,
    pub tau0_sq: f64,
    /// First step run at `τ² = 1`.
    #[serde(rename = "T1")]
    pub switch_step: u64,
    #[serde(rename = "T2")]
    pub total_steps: u64,
    #[serde(default = "default_batch")]
    pub batch: BatchSize,
    #[serde(default = "default_stop")]
    pub stop_grad_norm: f64,
}

impl Schedule {
    /// Constant `τ² = 1` for `total_steps` steps on the population gradient.
    pub fn constant(eta: f64, total_steps: u64) -> Self {
        Self {
            eta,
            tau0_sq: 1.0,
            switch_step: 0,
            total_steps,
            batch: BatchSize::Population,
            stop_grad_norm: DEFAULT_STOP_GRAD_NORM,
        }
    }

    /// `τ₀² = 1/d²` up to `switch_step`, then 1.
    pub fn two_phase(eta: f64, ambient_dim: usize, switch_step: u64, total_steps: u64) -> Self {
        let d = ambient_dim as f64;
        Self {
            tau0_sq: 1.0 / (d * d),
            switch_step,
            ..Self::constant(eta, total_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(alloc::format!("learning rate {} must be finite and non-negative", self.eta));
        }
        if !(self.tau0_sq > 0.0 && self.tau0_sq <= 1.0) {
            return bad(alloc::format!("tau0_sq = {} must lie in (0, 1]", self.tau0_sq));
        }
        if self.total_steps == 0 || self.switch_step > self.total_steps {
            return bad(alloc::format!(
                "need 0 < T2 and T1 <= T2, got T1 = {} and T2 = {}",
                self.switch_step,
                self.total_steps
            ));
        }
        if !(self.stop_grad_norm > 0.0) {
            return bad(alloc::format!("stop_grad_norm = {} must be positive", self.stop_grad_norm));
        }
        Ok(())
    }
}

/// τ² at `step`; non-contrastive runs always use 1.
pub fn temperature(schedule: &Schedule, step: u64, kind: LossKind) -> f64 {
    match kind {
        LossKind::NonContrastive => 1.0,
        LossKind::Contrastive if step < schedule.switch_step => schedule.tau0_sq,
        LossKind::Contrastive => 1.0,
    }
}

/// What to record and how often.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecorderSpec {
    pub stride: u64,
    /// Monte Carlo samples for the alignment score when enumeration exceeds
    /// the default budget.
    pub alignment_samples: u64,
}

impl Default for RecorderSpec {
    fn default() -> Self {
        Self {
            stride: 10,
            alignment_samples: 4096,
        }
    }
}

impl RecorderSpec {
    pub fn snapshot_stride(&self) -> u64 {
        self.stride.saturating_mul(10)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub tau_sq: f64,
    pub loss: f64,
    /// Frobenius norm of `∇L` over both weight matrices.
    pub grad_norm: f64,
    pub metrics: MetricsRecord,
    pub snapshot: Option<KState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Termination {
    Completed,
    /// Non-contrastive run reached `‖∇L̂‖_F ≤ stop_grad_norm`.
    Converged { step: u64, grad_norm: f64 },
    /// A normalizer fell below the collapse threshold at `step`.
    Collapsed { step: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub termination: Termination,
    pub final_weights: WeightState,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("loss became non-finite at step {step}")]
    Divergence {
        step: u64,
        last_good: Box<WeightState>,
        trajectory: Box<Trajectory>,
    },
    #[error(transparent)]
    Model(#[from] Error),
}

/// One evaluation of the loss and descent direction at the current weights.
struct Evaluation {
    loss: f64,
    /// `−τ⁻² ∇L`.
    descent: GradientPair,
}

struct Runner<'a> {
    config: &'a ModelConfig,
    encoders: &'a EncoderSet,
    schedule: &'a Schedule,
    kind: LossKind,
    step_strategy: ExpectationStrategy,
    alignment: ExpectationStrategy,
    recorder: &'a RecorderSpec,
}

impl Runner<'_> {
    fn evaluate(&self, kstate: &KState, step: u64) -> Result<Evaluation> {
        let tau_sq = temperature(self.schedule, step, self.kind);
        // Fresh positives every step: a fixed sample set lets the noise
        // columns fit that set and stalls balancing.
        let stream = step + 1;
        let qset = match (self.kind, self.schedule.batch) {
            (LossKind::NonContrastive, BatchSize::Population) => {
                let q = non_contrastive_qset(kstate);
                return Ok(Evaluation {
                    loss: non_contrastive_loss_closed_form(kstate),
                    descent: descent_from_qset(kstate, self.encoders, &q),
                });
            }
            (kind, _) => {
                let negatives = if kind == LossKind::Contrastive {
                    self.config.negatives
                } else {
                    0.0
                };
                let moments = population_moments(
                    kstate,
                    tau_sq,
                    negatives,
                    kind,
                    &self.step_strategy,
                    stream,
                    MomentRequest::Q,
                )?;
                (moments.loss.value, qset_from_moments(&moments, kstate.signal_dim))
            }
        };
        Ok(Evaluation {
            loss: qset.0,
            descent: descent_from_qset(kstate, self.encoders, &qset.1),
        })
    }

    fn record(
        &self,
        kstate: &KState,
        step: u64,
        eval: &Evaluation,
        grad_norm: f64,
    ) -> Result<TrajectoryRecord> {
        let snapshot_stride = self.recorder.snapshot_stride();
        Ok(TrajectoryRecord {
            step,
            tau_sq: temperature(self.schedule, step.min(self.schedule.total_steps - 1), self.kind),
            loss: eval.loss,
            grad_norm,
            metrics: metrics(kstate, &self.alignment)?,
            snapshot: (snapshot_stride > 0 && step % snapshot_stride == 0).then(|| kstate.clone()),
        })
    }
}

/// Builds encoders and initial weights from `config.seed` and trains.
pub fn run(
    config: &ModelConfig,
    schedule: &Schedule,
    kind: LossKind,
    strategy: &ExpectationStrategy,
    recorder: &RecorderSpec,
) -> core::result::Result<Trajectory, RunError> {
    config.validate()?;
    let encoders = build_encoders(config, &mut rng_for(config.seed, Stream::Encoders))?;
    let weights = init_weights(config, &mut rng_for(config.seed, Stream::Weights));
    run_from(config, &encoders, weights, schedule, kind, strategy, recorder)
}

/// Trains from explicit encoders and initial weights.
///
/// Step `t` records the state before its update; the state after the last
/// update is recorded as step `T2`. With a finite batch, every step draws a
/// fresh set of positives and evaluates the inner expectation over negatives
/// exactly. With the population gradient the outer expectation follows
/// `strategy`, again with fresh samples per step in Monte Carlo mode.
pub fn run_from(
    config: &ModelConfig,
    encoders: &EncoderSet,
    mut weights: WeightState,
    schedule: &Schedule,
    kind: LossKind,
    strategy: &ExpectationStrategy,
    recorder: &RecorderSpec,
) -> core::result::Result<Trajectory, RunError> {
    schedule.validate()?;
    if recorder.stride == 0 {
        return Err(Error::InvalidConfig("recorder stride must be positive".into()).into());
    }
    let step_strategy = match schedule.batch {
        BatchSize::Population => *strategy,
        BatchSize::Size(n) => {
            ExpectationStrategy::monte_carlo(n, rng_for(config.seed, Stream::Batches).next_u64())
        }
    };
    let d = config.ambient_dim;
    let n = config.noise_dim();
    let alignment = ExpectationStrategy::monte_carlo(
        recorder.alignment_samples.max(2),
        rng_for(config.seed, Stream::Alignment).next_u64(),
    )
    .exact_if_within((config.signal_dim + 2 * n + d) as u32);
    let runner = Runner {
        config,
        encoders,
        schedule,
        kind,
        step_strategy,
        alignment,
        recorder,
    };

    let mut records = Vec::new();
    let mut last_good = weights.clone();
    let total = schedule.total_steps;
    for step in 0..=total {
        let kstate = match compute_kstate(&weights, encoders) {
            Ok(k) => k,
            Err(Error::Collapse { .. }) => {
                return Ok(Trajectory {
                    records,
                    termination: Termination::Collapsed { step },
                    final_weights: weights,
                });
            }
            Err(e) => return Err(e.into()),
        };
        let eval = runner.evaluate(&kstate, step)?;
        let tau_sq = temperature(schedule, step.min(total - 1), kind);
        let grad_norm = tau_sq * eval.descent.norm();
        if !eval.loss.is_finite() || !grad_norm.is_finite() {
            return Err(RunError::Divergence {
                step,
                last_good: Box::new(last_good),
                trajectory: Box::new(Trajectory {
                    records,
                    termination: Termination::Completed,
                    final_weights: weights,
                }),
            });
        }
        let converged = kind == LossKind::NonContrastive && grad_norm <= schedule.stop_grad_norm;
        if step % recorder.stride == 0 || step == total || converged {
            records.push(runner.record(&kstate, step, &eval, grad_norm)?);
        }
        if converged {
            return Ok(Trajectory {
                records,
                termination: Termination::Converged { step, grad_norm },
                final_weights: weights,
            });
        }
        if step == total {
            break;
        }
        last_good = weights.clone();
        weights.w_a += &eval.descent.w_a * schedule.eta;
        weights.w_b += &eval.descent.w_b * schedule.eta;
    }
    Ok(Trajectory {
        records,
        termination: Termination::Completed,
        final_weights: weights,
    })
}

/// Thresholds of [`stage_boundary_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageThresholds {
    /// Stage 1 ends once `ρ_−` and `ρ_{N/S}` are both at most this.
    pub delta: f64,
    /// Stage 2 ends once `κ₀` is at most this.
    pub c_target: f64,
}

impl Default for StageThresholds {
    fn default() -> Self {
        Self {
            delta: 1e-2,
            c_target: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageReport {
    pub thresholds: StageThresholds,
    /// First recorded step meeting the stage-1 condition.
    pub stage1_exit: Option<u64>,
    /// First recorded step at or after the stage-1 exit with `κ₀ ≤ c_target`.
    pub stage2_exit: Option<u64>,
    pub last_step: u64,
    pub last_rho_minus: f64,
    pub last_rho_ns: f64,
    pub last_kappa0: f64,
}

pub fn stage_boundary_report(trajectory: &Trajectory, thresholds: StageThresholds) -> Result<StageReport> {
    let last = trajectory
        .records
        .last()
        .ok_or(Error::DegenerateState("empty trajectory"))?;
    let stage1 = trajectory.records.iter().position(|r| {
        r.metrics.rho_minus <= thresholds.delta && r.metrics.rho_ns <= thresholds.delta
    });
    let stage2 = stage1.and_then(|start| {
        trajectory.records[start..]
            .iter()
            .find(|r| r.metrics.kappa0 <= thresholds.c_target)
            .map(|r| r.step)
    });
    Ok(StageReport {
        thresholds,
        stage1_exit: stage1.map(|i| trajectory.records[i].step),
        stage2_exit: stage2,
        last_step: last.step,
        last_rho_minus: last.metrics.rho_minus,
        last_rho_ns: last.metrics.rho_ns,
        last_kappa0: last.metrics.kappa0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_phase_temperature() {
        let s = Schedule {
            tau0_sq: 1e-4,
            switch_step: 500,
            ..Schedule::constant(1e-3, 1000)
        };
        assert_eq!(temperature(&s, 499, LossKind::Contrastive), 1e-4);
        assert_eq!(temperature(&s, 500, LossKind::Contrastive), 1.0);
        assert_eq!(temperature(&s, 0, LossKind::NonContrastive), 1.0);
        let flat = Schedule::constant(1e-3, 10);
        assert!((0..10).all(|t| temperature(&flat, t, LossKind::Contrastive) == 1.0));
    }

    #[test]
    fn batch_size_json() {
        let s: Schedule = serde_json::from_str(
            r#"{"eta": 0.1, "tau0_sq": 0.01, "T1": 5, "T2": 10, "batch": "population"}"#,
        )
        .unwrap();
        assert_eq!(s.batch, BatchSize::Population);
        assert_eq!(s.stop_grad_norm, DEFAULT_STOP_GRAD_NORM);
        let s: Schedule =
            serde_json::from_str(r#"{"eta": 0.1, "tau0_sq": 0.01, "T1": 5, "T2": 10, "batch": 64}"#)
                .unwrap();
        assert_eq!(s.batch, BatchSize::Size(64));
        assert!(serde_json::from_str::<Schedule>(
            r#"{"eta": 0.1, "tau0_sq": 0.01, "T1": 5, "T2": 10, "batch": 0}"#
        )
        .is_err());
    }

    #[test]
    fn schedule_validation() {
        let mut s = Schedule::constant(0.1, 10);
        s.switch_step = 11;
        assert!(s.validate().is_err());
        s.switch_step = 10;
        s.tau0_sq = 2.0;
        assert!(s.validate().is_err());
    }

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::flat(4, 2, 6, 3);
        c.negatives = 1.0;
        c
    }

    #[test]
    fn frozen_dynamics_keep_loss_constant() {
        let c = small_config();
        let t = run(
            &c,
            &Schedule::constant(0.0, 20),
            LossKind::Contrastive,
            &ExpectationStrategy::exact(),
            &RecorderSpec::default(),
        )
        .unwrap();
        let l0 = t.records[0].loss;
        assert!(t.records.iter().all(|r| r.loss == l0));
        assert_eq!(t.records.last().unwrap().step, 20);
    }

    #[test]
    fn runs_are_deterministic() {
        let c = small_config();
        let s = Schedule::two_phase(0.05, 4, 10, 30);
        let go = || {
            run(
                &c,
                &s,
                LossKind::Contrastive,
                &ExpectationStrategy::monte_carlo(64, 9),
                &RecorderSpec {
                    stride: 5,
                    alignment_samples: 128,
                },
            )
            .unwrap()
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn early_stop_records_small_gradient() {
        let c = small_config();
        let mut s = Schedule::constant(0.5, 5000);
        s.stop_grad_norm = 1e-3;
        let t = run(
            &c,
            &s,
            LossKind::NonContrastive,
            &ExpectationStrategy::exact(),
            &RecorderSpec::default(),
        )
        .unwrap();
        match t.termination {
            Termination::Converged { grad_norm, .. } => {
                assert!(grad_norm <= 1e-3);
                assert_eq!(t.records.last().unwrap().grad_norm, grad_norm);
            }
            other => panic!("expected convergence, got {other:?}"),
        }
    }
}
