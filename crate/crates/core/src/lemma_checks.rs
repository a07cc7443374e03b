//! Numerical audits of the headline estimates.
//!
//! Each audit compares a measured quantity with its predicted closed form and
//! passes when the error stays within a budget. Budgets that carry a hidden
//! constant use [`FittedConstants`], which are fitted once at a calibration
//! point and then frozen.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expectation::ExpectationStrategy;
use crate::gradients::{compute_qset, cosine, krates_from_qset, non_contrastive_qset, zero_temperature_weight};
use crate::infinite_width::{
    analytic_witness, closed_forms, gronwall_verify, GronwallWitness, InfiniteWidthState,
};
use crate::metrics::{diagnostics, DiagnosticsRecord};
use crate::model::{compute_kstate, EncoderSet, KState, WeightState};
use crate::training::Trajectory;

pub use crate::model::adversarial_sigma;

/// Largest orthogonality diagnostic at which the stage-2 audits apply.
pub const STAGE2_DIAGNOSTIC_LIMIT: f64 = 0.05;
/// Smallest accepted cosine in the stage-1 equivalence audit.
pub const EQUIVALENCE_COSINE: f64 = 0.999;
/// Error floor of the stage-2 audits; covers rounding on ideal states.
pub const STAGE2_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// The audit's preconditions do not hold on this input.
    Inapplicable,
    /// The budget could not be established.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub lemma: String,
    pub measured: Vec<f64>,
    pub predicted: Vec<f64>,
    pub error: f64,
    pub budget: f64,
    pub verdict: Verdict,
    pub note: Option<String>,
}

impl AuditReport {
    /// A report whose verdict is `Pass` iff `error <= budget`, `Inconclusive` for a non-finite budget.
    pub fn judged(lemma: &str, measured: Vec<f64>, predicted: Vec<f64>, error: f64, budget: f64) -> Self {
        let verdict = if !budget.is_finite() {
            Verdict::Inconclusive
        } else if error <= budget {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Self {
            lemma: lemma.to_string(),
            measured,
            predicted,
            error,
            budget,
            verdict,
            note: None,
        }
    }

    pub fn inapplicable(lemma: &str, note: String) -> Self {
        Self {
            lemma: lemma.to_string(),
            measured: Vec::new(),
            predicted: Vec::new(),
            error: f64::NAN,
            budget: f64::NAN,
            verdict: Verdict::Inapplicable,
            note: Some(note),
        }
    }

    pub fn pass(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// Constants hidden by the `O(·)` envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FittedConstants {
    /// Stage-1 `Q_1` budget `C d τ²`.
    pub stage1_q1: f64,
    /// Stage-2 diagonal budget `C d² δ²`.
    pub stage2_q1_diag: f64,
    /// Stage-2 `Q_0` budget `C d² δ²`.
    pub stage2_q0: f64,
    /// Gronwall coupling `β = C σ_max²/σ_min²`.
    pub gronwall: f64,
}

/// Frozen values, fitted on contrastive runs with `d = 8`, `r = 4`,
/// `m = 4096`, `σ² = (ln 8, 1, 1, 1)`, `σ_ξ² = 0.1`, `η = 0.5` and exact
/// expectations, then rounded up by roughly a factor of two.
///
/// Observed maxima over seeds 11 to 13: stage-1 ratio `error/(d τ²)` at
/// `τ² = 1e-4` of 0.14, stage-2 ratios `error/(d² δ²)` of 1.04 once the
/// pair is aligned, and a Gronwall coupling of 0.89.
impl Default for FittedConstants {
    fn default() -> Self {
        Self {
            stage1_q1: 0.3,
            stage2_q1_diag: 2.0,
            stage2_q0: 2.0,
            gronwall: 2.0,
        }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Measured `Q_1` against `(2K/(1+K)) I_r`; budget `C d τ²` plus a rounding floor.
pub fn audit_stage1_q1(
    kstate: &KState,
    tau_sq: f64,
    negatives: f64,
    strategy: &ExpectationStrategy,
    constants: &FittedConstants,
) -> Result<AuditReport> {
    const LEMMA: &str = "stage1-q1";
    if tau_sq > 1e-2 {
        return Ok(AuditReport::inapplicable(
            LEMMA,
            alloc::format!("τ² = {tau_sq} exceeds 1e-2"),
        ));
    }
    let q = compute_qset(kstate, tau_sq, negatives, strategy)?;
    let r = kstate.signal_dim;
    let weight = zero_temperature_weight(negatives);
    let measured: Vec<f64> = q.q1.iter().copied().collect();
    let predicted: Vec<f64> = (0..r * r)
        .map(|i| if i % r == i / r { weight } else { 0.0 })
        .collect();
    let error = max_abs_diff(&measured, &predicted);
    // The floor absorbs rounding in the sigmoid at τ² = 0.
    let budget =
        constants.stage1_q1 * kstate.ambient_dim() as f64 * tau_sq + 8.0 * f64::EPSILON * weight;
    Ok(AuditReport::judged(LEMMA, measured, predicted, error, budget))
}

/// `(κ², κ̂²)` read off the signal columns.
pub fn measured_state(kstate: &KState) -> Result<InfiniteWidthState> {
    let r = kstate.signal_dim;
    let g = kstate.grams();
    InfiniteWidthState::new(
        (0..r).map(|p| g.aa[(p, p)]).collect(),
        (0..r).map(|p| g.ab[(p, p)]).collect(),
    )
}

struct Stage2Inputs {
    diagnostics: DiagnosticsRecord,
    delta: f64,
    state: InfiniteWidthState,
    /// `2(1 − S̃)(1 − T_p)`.
    predicted_diag: Vec<f64>,
    measured_diag: Vec<f64>,
    measured_q0: f64,
}

fn stage2_inputs(
    kstate: &KState,
    tau_sq: f64,
    negatives: f64,
    strategy: &ExpectationStrategy,
) -> Result<core::result::Result<Stage2Inputs, String>> {
    let dg = diagnostics(kstate)?;
    let delta = DiagnosticsRecord::signal_max(kstate)?;
    if delta > STAGE2_DIAGNOSTIC_LIMIT {
        return Ok(Err(alloc::format!(
            "signal diagnostics {delta:.3e} exceed {STAGE2_DIAGNOSTIC_LIMIT}"
        )));
    }
    let state = measured_state(kstate)?;
    let cf = closed_forms(&state, tau_sq, negatives)?;
    let predicted_diag = cf.t.iter().map(|t| 2.0 * (1.0 - cf.s_tilde) * (1.0 - t)).collect();
    let q = compute_qset(kstate, tau_sq, negatives, strategy)?;
    Ok(Ok(Stage2Inputs {
        diagnostics: dg,
        delta,
        state,
        predicted_diag,
        measured_diag: q.q1.diagonal().iter().copied().collect(),
        measured_q0: q.q0,
    }))
}

fn relative_max(measured: &[f64], predicted: &[f64]) -> f64 {
    measured
        .iter()
        .zip(predicted)
        .map(|(m, p)| (m - p).abs() / p.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Measured `[Q_1]_pp` against `2(1 − S̃)(1 − T_p)`; relative error with
/// budget `1e-6 + C d² δ²`, where `δ` is the largest signal diagnostic.
pub fn audit_stage2_q1_diag(
    kstate: &KState,
    tau_sq: f64,
    negatives: f64,
    strategy: &ExpectationStrategy,
    constants: &FittedConstants,
) -> Result<AuditReport> {
    const LEMMA: &str = "stage2-q1-diag";
    let inputs = match stage2_inputs(kstate, tau_sq, negatives, strategy)? {
        Ok(i) => i,
        Err(note) => return Ok(AuditReport::inapplicable(LEMMA, note)),
    };
    let d = kstate.ambient_dim() as f64;
    let error = relative_max(&inputs.measured_diag, &inputs.predicted_diag);
    let budget = STAGE2_FLOOR + constants.stage2_q1_diag * d * d * inputs.delta * inputs.delta;
    let mut report = AuditReport::judged(LEMMA, inputs.measured_diag, inputs.predicted_diag, error, budget);
    report.note = Some(alloc::format!("max diagnostic {:.3e}", inputs.diagnostics.max()));
    Ok(report)
}

/// Measured `Q_0` against `−Σ_k (κ_k²/‖κ‖²) 2(1 − S̃)(1 − T_k)`.
pub fn audit_stage2_q0(
    kstate: &KState,
    tau_sq: f64,
    negatives: f64,
    strategy: &ExpectationStrategy,
    constants: &FittedConstants,
) -> Result<AuditReport> {
    const LEMMA: &str = "stage2-q0";
    let inputs = match stage2_inputs(kstate, tau_sq, negatives, strategy)? {
        Ok(i) => i,
        Err(note) => return Ok(AuditReport::inapplicable(LEMMA, note)),
    };
    let total = inputs.state.total();
    let predicted: f64 = -inputs
        .state
        .kappa_sq
        .iter()
        .zip(&inputs.predicted_diag)
        .map(|(k, q)| k / total * q)
        .sum::<f64>();
    let d = kstate.ambient_dim() as f64;
    let error = relative_max(&[inputs.measured_q0], &[predicted]);
    let budget = STAGE2_FLOOR + constants.stage2_q0 * d * d * inputs.delta * inputs.delta;
    Ok(AuditReport::judged(
        LEMMA,
        vec![inputs.measured_q0],
        vec![predicted],
        error,
        budget,
    ))
}

/// Cosine between the contrastive `dK_A^full` and the scaled
/// non-contrastive one; passes at cosine ≥ 0.999.
pub fn audit_noncontrastive_equivalence(
    weights: &WeightState,
    encoders: &EncoderSet,
    tau_sq: f64,
    negatives: f64,
    strategy: &ExpectationStrategy,
) -> Result<AuditReport> {
    const LEMMA: &str = "noncontrastive-equivalence";
    let kstate = compute_kstate(weights, encoders)?;
    let sigma_sq: Vec<f64> = encoders.sigma_sq.clone();
    let contrastive = krates_from_qset(
        &kstate,
        &compute_qset(&kstate, tau_sq, negatives, strategy)?,
        &sigma_sq,
        encoders.noise_variance,
    )?;
    let plain = krates_from_qset(
        &kstate,
        &non_contrastive_qset(&kstate),
        &sigma_sq,
        encoders.noise_variance,
    )?;
    let scaled = plain.full(crate::Side::A) * zero_temperature_weight(negatives);
    let cos = cosine(&contrastive.full(crate::Side::A), &scaled);
    let mut report = AuditReport::judged(LEMMA, vec![cos], vec![1.0], 1.0 - cos, 1.0 - EQUIVALENCE_COSINE);
    if tau_sq > 1e-3 {
        report.note = Some(alloc::format!("τ² = {tau_sq} is outside the stage-1 regime"));
    }
    Ok(report)
}

/// The closed-form witness `A ≡ 1`, `X₀ = Y₀ = β = 1` on `[0, 10]`.
pub fn audit_gronwall_analytic() -> Result<AuditReport> {
    let w = analytic_witness(1.0, 1.0, 1.0, 10.0, 10_000);
    gronwall_report("gronwall-analytic", &w)
}

fn gronwall_report(lemma: &str, witness: &GronwallWitness) -> Result<AuditReport> {
    match gronwall_verify(witness) {
        Ok(out) => {
            let excess = out.y_final - out.bound;
            Ok(AuditReport::judged(
                lemma,
                vec![out.y_final],
                vec![out.bound],
                excess / out.bound,
                crate::infinite_width::BOUND_TOLERANCE,
            ))
        }
        Err(Error::Inapplicable { index, reason }) => Ok(AuditReport::inapplicable(
            lemma,
            alloc::format!("interval {index}: {reason}"),
        )),
        Err(e) => Err(e),
    }
}

/// Traces `X = max(ρ_−, ρ_{N/S})` and `Y = κ₀` over the leading stretch of
/// records, stopping before the first record where `X` fails to decrease or
/// the temperature leaves its stage-1 value.
pub fn stage1_traces(trajectory: &Trajectory, eta: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut times = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let Some(first) = trajectory.records.first() else {
        return (times, xs, ys);
    };
    for rec in &trajectory.records {
        let x = rec.metrics.rho_minus.max(rec.metrics.rho_ns);
        if rec.tau_sq != first.tau_sq || xs.last().is_some_and(|prev| x >= *prev) || !(x > 0.0) {
            break;
        }
        times.push(rec.step as f64 * eta);
        xs.push(x);
        ys.push(rec.metrics.kappa0);
    }
    (times, xs, ys)
}

/// Smallest `C` for which `β = C σ_max²/σ_min²` satisfies the `Y`
/// hypothesis on every interval of the traces.
pub fn fit_gronwall_constant(times: &[f64], xs: &[f64], ys: &[f64], sigma_sq: &[f64]) -> Result<f64> {
    let witness = GronwallWitness::from_traces(1.0, times.to_vec(), xs.to_vec(), ys.to_vec())?;
    let ratio = spectrum_ratio(sigma_sq);
    let mut c: f64 = 0.0;
    for i in 0..times.len() - 1 {
        let dt = times[i + 1] - times[i];
        let rhs = dt * witness.a_trace[i] * xs[i] * ratio;
        let dly = crate::math::ln(ys[i + 1] / ys[i]);
        c = c.max(dly / rhs);
    }
    Ok(c)
}

fn spectrum_ratio(sigma_sq: &[f64]) -> f64 {
    let max = sigma_sq.iter().copied().fold(f64::MIN, f64::max);
    let min = sigma_sq.iter().copied().fold(f64::MAX, f64::min);
    max / min
}

/// The Gronwall conclusion on measured stage-1 traces of a contrastive run.
pub fn audit_gronwall_measured(
    trajectory: &Trajectory,
    eta: f64,
    sigma_sq: &[f64],
    constants: &FittedConstants,
) -> Result<AuditReport> {
    const LEMMA: &str = "gronwall-measured";
    let (times, xs, ys) = stage1_traces(trajectory, eta);
    if times.len() < 2 {
        return Ok(AuditReport::inapplicable(
            LEMMA,
            "fewer than two stage-1 records with decreasing X".to_string(),
        ));
    }
    let beta = constants.gronwall * spectrum_ratio(sigma_sq);
    let witness = GronwallWitness::from_traces(beta, times, xs, ys)?;
    gronwall_report(LEMMA, &witness)
}
