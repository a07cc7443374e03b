//! The noiseless infinite-width reduction.
//!
//! When the columns of `K_A` and `K_B` are mutually orthogonal across
//! different indices and paired columns have equal norms, the dynamics close
//! on `κ_p² = ‖[K_A]_p‖²` and `κ̂_p² = ⟨[K_A]_p, [K_B]_p⟩`. This module holds
//! the closed-form auxiliaries, the rates, a fixed-step RK4 integrator and the
//! Gronwall comparison check used to certify stage-1 traces.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosh, exp, ln, tanh};

/// Maximum number of step halvings before a stiffness error.
pub const MAX_HALVINGS: u32 = 20;

/// `(κ², κ̂²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfiniteWidthState {
    pub kappa_sq: Vec<f64>,
    pub hat_kappa_sq: Vec<f64>,
}

impl InfiniteWidthState {
    pub fn new(kappa_sq: Vec<f64>, hat_kappa_sq: Vec<f64>) -> Result<Self> {
        let s = Self {
            kappa_sq,
            hat_kappa_sq,
        };
        s.check()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.kappa_sq.len()
    }

    fn check(&self) -> Result<()> {
        if self.kappa_sq.len() != self.hat_kappa_sq.len() || self.kappa_sq.is_empty() {
            return Err(Error::DimensionMismatch(alloc::format!(
                "κ² has {} entries and κ̂² has {}",
                self.kappa_sq.len(),
                self.hat_kappa_sq.len()
            )));
        }
        Ok(())
    }

    /// True when every `κ_p² > 0` and `|κ̂_p²| ≤ κ_p²` (up to rounding).
    pub fn is_admissible(&self) -> bool {
        self.kappa_sq
            .iter()
            .zip(&self.hat_kappa_sq)
            .all(|(k, h)| *k > 0.0 && k.is_finite() && h.abs() <= k * (1.0 + 1e-12))
    }

    fn axpy(&self, h: f64, rates: &(Vec<f64>, Vec<f64>)) -> Self {
        Self {
            kappa_sq: self
                .kappa_sq
                .iter()
                .zip(&rates.0)
                .map(|(x, r)| x + h * r)
                .collect(),
            hat_kappa_sq: self
                .hat_kappa_sq
                .iter()
                .zip(&rates.1)
                .map(|(x, r)| x + h * r)
                .collect(),
        }
    }

    /// `‖κ‖² = Σ κ_p²`.
    pub fn total(&self) -> f64 {
        self.kappa_sq.iter().sum()
    }
}

/// Closed-form auxiliaries of a state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedForms {
    /// `Π_k cosh(τ² κ̂_k²/‖κ‖²)`.
    pub z_c: f64,
    /// `T_p = tanh(τ² κ̂_p²/‖κ‖²)`.
    pub t: Vec<f64>,
    /// `Ẽ / (Ẽ + K Z_c)`.
    pub s_tilde: f64,
    /// `Σ_k (κ̂_k²/‖κ‖²) T_k`.
    pub t_tilde: f64,
    /// `exp(τ² ‖κ̂‖²/‖κ‖²)` with `‖κ̂‖² = Σ κ̂_k²`.
    pub e_tilde: f64,
}

pub fn closed_forms(state: &InfiniteWidthState, tau_sq: f64, negatives: f64) -> Result<ClosedForms> {
    state.check()?;
    let norm = state.total();
    if !(norm > 0.0) {
        return Err(Error::DegenerateState("‖κ‖² is not positive"));
    }
    let args: Vec<f64> = state
        .hat_kappa_sq
        .iter()
        .map(|h| tau_sq * h / norm)
        .collect();
    let log_z: f64 = args.iter().map(|&x| crate::math::log_cosh(x)).sum();
    let t: Vec<f64> = args.iter().map(|&x| tanh(x)).collect();
    let t_tilde = state
        .hat_kappa_sq
        .iter()
        .zip(&t)
        .map(|(h, tp)| h / norm * tp)
        .sum();
    let hat_total: f64 = state.hat_kappa_sq.iter().sum();
    let log_e = tau_sq * hat_total / norm;
    // S̃ = 1 / (1 + K Z_c / Ẽ) evaluated in log space.
    let s_tilde = crate::math::sigmoid(-(ln(negatives) + log_z - log_e));
    Ok(ClosedForms {
        z_c: exp(log_z),
        t,
        s_tilde,
        t_tilde,
        e_tilde: exp(log_e),
    })
}

/// `(dκ²/dt, dκ̂²/dt)` in the τ⁻²-rescaled convention.
pub fn iw_rates(
    state: &InfiniteWidthState,
    sigma_sq: &[f64],
    tau_sq: f64,
    negatives: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigma_sq.len() != state.dim() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "{} variances for a state of dimension {}",
            sigma_sq.len(),
            state.dim()
        )));
    }
    let cf = closed_forms(state, tau_sq, negatives)?;
    let norm = state.total();
    let hat_ratio: f64 = state.hat_kappa_sq.iter().sum::<f64>() / norm;
    let coef = 4.0 * (1.0 - cf.s_tilde);
    let mut d_kappa = Vec::with_capacity(state.dim());
    let mut d_hat = Vec::with_capacity(state.dim());
    for p in 0..state.dim() {
        let k = state.kappa_sq[p] / norm;
        let h = state.hat_kappa_sq[p] / norm;
        let tp = cf.t[p];
        d_kappa.push(coef * ((h - hat_ratio * k) - (h * tp - k * cf.t_tilde)) * sigma_sq[p]);
        d_hat.push(coef * ((k - hat_ratio * h) - (k * tp - h * cf.t_tilde)) * sigma_sq[p]);
    }
    Ok((d_kappa, d_hat))
}

/// τ² as a function of continuous time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Temperature {
    Constant { tau_sq: f64 },
    /// `tau0_sq` before `switch_time`, then 1.
    Switch { tau0_sq: f64, switch_time: f64 },
}

impl Temperature {
    pub fn at(&self, time: f64) -> f64 {
        match *self {
            Temperature::Constant { tau_sq } => tau_sq,
            Temperature::Switch {
                tau0_sq,
                switch_time,
            } => {
                if time < switch_time {
                    tau0_sq
                } else {
                    1.0
                }
            }
        }
    }
}

/// Samples of an integrated trajectory, one per step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IwTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<InfiniteWidthState>,
    pub tau_sq: Vec<f64>,
    pub s_tilde: Vec<f64>,
    pub t_tilde: Vec<f64>,
    /// Total number of step halvings performed.
    pub halvings: u32,
}

impl IwTrajectory {
    pub fn last(&self) -> &InfiniteWidthState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

struct Rk4<'a> {
    sigma_sq: &'a [f64],
    negatives: f64,
}

impl Rk4<'_> {
    fn step(&self, s: &InfiniteWidthState, tau_sq: f64, h: f64) -> Result<InfiniteWidthState> {
        let f = |x: &InfiniteWidthState| iw_rates(x, self.sigma_sq, tau_sq, self.negatives);
        let k1 = f(s)?;
        let k2 = f(&s.axpy(h / 2.0, &k1))?;
        let k3 = f(&s.axpy(h / 2.0, &k2))?;
        let k4 = f(&s.axpy(h, &k3))?;
        let n = s.dim();
        let combine = |a: &[f64], i: usize, k: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
            a[i] + h / 6.0 * (k(&k1)[i] + 2.0 * k(&k2)[i] + 2.0 * k(&k3)[i] + k(&k4)[i])
        };
        let first: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64> = |x| &x.0;
        let second: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64> = |x| &x.1;
        Ok(InfiniteWidthState {
            kappa_sq: (0..n).map(|i| combine(&s.kappa_sq, i, first)).collect(),
            hat_kappa_sq: (0..n).map(|i| combine(&s.hat_kappa_sq, i, second)).collect(),
        })
    }

    /// Advances by `h`, splitting the interval while positivity fails.
    fn advance(
        &self,
        s: &InfiniteWidthState,
        time: f64,
        tau_sq: f64,
        h: f64,
        depth: u32,
        halvings: &mut u32,
    ) -> Result<InfiniteWidthState> {
        let next = self.step(s, tau_sq, h)?;
        if next.kappa_sq.iter().all(|k| *k > 0.0 && k.is_finite())
            && next.hat_kappa_sq.iter().all(|x| x.is_finite())
        {
            return Ok(next);
        }
        if depth >= MAX_HALVINGS {
            return Err(Error::Stiffness {
                time,
                halvings: depth,
            });
        }
        *halvings += 1;
        let mid = self.advance(s, time, tau_sq, h / 2.0, depth + 1, halvings)?;
        self.advance(&mid, time + h / 2.0, tau_sq, h / 2.0, depth + 1, halvings)
    }
}

/// Classical fourth-order Runge-Kutta with fixed step `h` up to `horizon`.
///
/// τ² is held at its value at the start of each step.
pub fn integrate_iw(
    state0: &InfiniteWidthState,
    sigma_sq: &[f64],
    negatives: f64,
    temperature: Temperature,
    h: f64,
    horizon: f64,
) -> Result<IwTrajectory> {
    if !(h > 0.0 && h.is_finite()) || !(horizon >= 0.0) {
        return Err(Error::InvalidConfig(alloc::format!(
            "step {h} and horizon {horizon} must be positive"
        )));
    }
    state0.check()?;
    if !state0.is_admissible() {
        return Err(Error::DegenerateState("initial state violates κ² > 0 or |κ̂²| ≤ κ²"));
    }
    let rk = Rk4 {
        sigma_sq,
        negatives,
    };
    let steps = libm::round(horizon / h) as u64;
    let mut out = IwTrajectory {
        times: Vec::with_capacity(steps as usize + 1),
        states: Vec::with_capacity(steps as usize + 1),
        tau_sq: Vec::with_capacity(steps as usize + 1),
        s_tilde: Vec::with_capacity(steps as usize + 1),
        t_tilde: Vec::with_capacity(steps as usize + 1),
        halvings: 0,
    };
    let mut state = state0.clone();
    for i in 0..=steps {
        let time = i as f64 * h;
        let tau_sq = temperature.at(time);
        let cf = closed_forms(&state, tau_sq, negatives)?;
        out.times.push(time);
        out.tau_sq.push(tau_sq);
        out.s_tilde.push(cf.s_tilde);
        out.t_tilde.push(cf.t_tilde);
        out.states.push(state.clone());
        if i == steps {
            break;
        }
        state = rk.advance(&state, time, tau_sq, h, 0, &mut out.halvings)?;
    }
    Ok(out)
}

/// Observed order of convergence from runs with steps `h`, `h/2`, `h/4`.
///
/// Returns `log2(‖y_h − y_{h/2}‖ / ‖y_{h/2} − y_{h/4}‖)` on the final state;
/// classical RK4 gives a value near 4.
pub fn convergence_order(
    state0: &InfiniteWidthState,
    sigma_sq: &[f64],
    negatives: f64,
    temperature: Temperature,
    h: f64,
    horizon: f64,
) -> Result<f64> {
    let run = |step: f64| integrate_iw(state0, sigma_sq, negatives, temperature, step, horizon);
    let a = run(h)?;
    let b = run(h / 2.0)?;
    let c = run(h / 4.0)?;
    let dist = |x: &InfiniteWidthState, y: &InfiniteWidthState| {
        x.kappa_sq
            .iter()
            .chain(&x.hat_kappa_sq)
            .zip(y.kappa_sq.iter().chain(&y.hat_kappa_sq))
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    };
    let coarse = dist(a.last(), b.last());
    let fine = dist(b.last(), c.last());
    Ok(libm::log2(coarse / fine))
}

/// Sampled processes for the comparison `dX ≤ −A X`, `dY ≤ β A X Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallWitness {
    pub beta: f64,
    pub times: Vec<f64>,
    pub a_trace: Vec<f64>,
    pub x_trace: Vec<f64>,
    pub y_trace: Vec<f64>,
}

/// Outcome of [`gronwall_verify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GronwallOutcome {
    pub y_final: f64,
    /// `Y_0 exp(β X_0)`.
    pub bound: f64,
    /// `bound (1 + tol) − Y_T`; non-negative on success.
    pub margin: f64,
    pub pass: bool,
}

/// Relative slack allowed in the discrete slope checks.
pub const SLOPE_TOLERANCE: f64 = 1e-3;
/// Relative slack of the conclusion.
pub const BOUND_TOLERANCE: f64 = 1e-6;

impl GronwallWitness {
    /// Derives `A_t = −d ln X/dt` from a decreasing `X` trace.
    pub fn from_traces(beta: f64, times: Vec<f64>, x_trace: Vec<f64>, y_trace: Vec<f64>) -> Result<Self> {
        let n = times.len();
        if n < 2 || x_trace.len() != n || y_trace.len() != n {
            return Err(Error::DimensionMismatch(alloc::format!(
                "traces of lengths {}, {}, {}",
                n,
                x_trace.len(),
                y_trace.len()
            )));
        }
        let mut a_trace = Vec::with_capacity(n);
        for i in 0..n {
            let (lo, hi) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
            let rate = -(ln(x_trace[hi]) - ln(x_trace[lo])) / (times[hi] - times[lo]);
            if !(rate > 0.0) {
                return Err(Error::Inapplicable {
                    index: lo,
                    reason: "X is not strictly decreasing, so A_t is not positive",
                });
            }
            a_trace.push(rate);
        }
        Ok(Self {
            beta,
            times,
            a_trace,
            x_trace,
            y_trace,
        })
    }
}

/// Checks the hypotheses on every sampled interval and then the conclusion
/// `Y_T ≤ Y_0 exp(β X_0)(1 + 1e-6)`.
///
/// The hypotheses are checked in integrated form, with left-endpoint
/// quadrature of `A` and `A X` on each interval:
/// `ln X_{i+1} − ln X_i ≤ −A_i Δt` and `ln Y_{i+1} − ln Y_i ≤ β A_i X_i Δt`.
pub fn gronwall_verify(witness: &GronwallWitness) -> Result<GronwallOutcome> {
    let w = witness;
    let n = w.times.len();
    if n < 2 || w.a_trace.len() != n || w.x_trace.len() != n || w.y_trace.len() != n {
        return Err(Error::DimensionMismatch(alloc::format!(
            "witness traces must share a length of at least 2, got {n}"
        )));
    }
    let positive = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
    if !(positive(&w.a_trace) && positive(&w.x_trace) && positive(&w.y_trace)) || !(w.beta >= 0.0) {
        return Err(Error::Inapplicable {
            index: 0,
            reason: "traces must be positive and β non-negative",
        });
    }
    for i in 0..n - 1 {
        let dt = w.times[i + 1] - w.times[i];
        if !(dt > 0.0) {
            return Err(Error::Inapplicable {
                index: i,
                reason: "sample times must increase",
            });
        }
        let int_a = dt * w.a_trace[i];
        let int_ax = dt * w.a_trace[i] * w.x_trace[i];
        let dlx = ln(w.x_trace[i + 1]) - ln(w.x_trace[i]);
        let dly = ln(w.y_trace[i + 1]) - ln(w.y_trace[i]);
        let slack_x = SLOPE_TOLERANCE * (dlx.abs() + int_a) + 1e-14;
        if dlx > -int_a + slack_x {
            return Err(Error::Inapplicable {
                index: i,
                reason: "dX ≤ −A X fails on this interval",
            });
        }
        let rhs = w.beta * int_ax;
        let slack_y = SLOPE_TOLERANCE * (dly.abs() + rhs) + 1e-14;
        if dly > rhs + slack_y {
            return Err(Error::Inapplicable {
                index: i,
                reason: "dY ≤ β A X Y fails on this interval",
            });
        }
    }
    let bound = w.y_trace[0] * exp(w.beta * w.x_trace[0]);
    let y_final = w.y_trace[n - 1];
    let margin = bound * (1.0 + BOUND_TOLERANCE) - y_final;
    Ok(GronwallOutcome {
        y_final,
        bound,
        margin,
        pass: margin >= 0.0,
    })
}

/// The closed-form witness `A ≡ 1`, `X = X_0 e^{−t}`, `Y = Y_0 exp(β X_0 (1 − e^{−t}))`.
pub fn analytic_witness(x0: f64, y0: f64, beta: f64, horizon: f64, samples: usize) -> GronwallWitness {
    let times: Vec<f64> = (0..=samples)
        .map(|i| horizon * i as f64 / samples as f64)
        .collect();
    GronwallWitness {
        beta,
        a_trace: alloc::vec![1.0; times.len()],
        x_trace: times.iter().map(|t| x0 * exp(-t)).collect(),
        y_trace: times
            .iter()
            .map(|t| y0 * exp(beta * x0 * (1.0 - exp(-t))))
            .collect(),
        times,
    }
}

/// `1/cosh²(x) + tanh²(x)`, which must equal one.
pub fn hyperbolic_identity(x: f64) -> f64 {
    let c = cosh(x);
    1.0 / (c * c) + tanh(x) * tanh(x)
}
