//! Closed-form gradients, the Q decomposition and the induced K dynamics.
//!
//! Rates are reported in the τ⁻²-rescaled convention: the descent direction
//! is `−τ⁻² ∇L`, so stage-1 dynamics stay of order one. With `M` the combined
//! Q matrix (see [`PopulationMoments`]) and `D = diag(σ², σ_ξ² I)`,
//!
//! ```text
//! dK_A^full = K_B^full M D / (N_A N_B d) + Q_0 K_A^full D / (N_A² d)
//! dK_B^full = K_A^full Mᵀ D / (N_A N_B d) + Q_0 K_B^full D / (N_B² d)
//! ```

use alloc::format;
use alloc::vec::Vec;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expectation::{
    contrastive_loss, non_contrastive_loss, population_moments, ExpectationStrategy, LossKind,
    MomentRequest, PopulationMoments, Positives,
};
use crate::math::{exp, frobenius_dot, sqrt};
use crate::model::{compute_kstate, EncoderSet, KState, Side, WeightState};
use crate::{Matrix, Vector};

/// The Q coefficients of the K dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct QSet {
    pub q0: f64,
    /// `r×r`.
    pub q1: Matrix,
    /// `(d−r)×r`; pairs `ξ_A` with `z`.
    pub q1_xi_a: Matrix,
    /// `(d−r)×r`; pairs `ξ_B` with `z`.
    pub q1_xi_b: Matrix,
    /// `(d−r)×(d−r)`; rows index `ξ_B`, columns `ξ_A`.
    pub q2: Matrix,
}

impl QSet {
    /// Splits the combined `d×d` matrix (rows B-latent, columns A-latent).
    pub fn from_matrix(matrix: &Matrix, q0: f64, signal_dim: usize) -> Self {
        let d = matrix.nrows();
        let n = d - signal_dim;
        Self {
            q0,
            q1: matrix.view((0, 0), (signal_dim, signal_dim)).into_owned(),
            q1_xi_a: matrix
                .view((0, signal_dim), (signal_dim, n))
                .transpose(),
            q1_xi_b: matrix.view((signal_dim, 0), (n, signal_dim)).into_owned(),
            q2: matrix.view((signal_dim, signal_dim), (n, n)).into_owned(),
        }
    }

    /// Reassembles the combined `d×d` matrix.
    pub fn to_matrix(&self) -> Matrix {
        let r = self.q1.nrows();
        let n = self.q2.nrows();
        let mut m = Matrix::zeros(r + n, r + n);
        m.view_mut((0, 0), (r, r)).copy_from(&self.q1);
        m.view_mut((0, r), (r, n)).copy_from(&self.q1_xi_a.transpose());
        m.view_mut((r, 0), (n, r)).copy_from(&self.q1_xi_b);
        m.view_mut((r, r), (n, n)).copy_from(&self.q2);
        m
    }

    pub fn zeros(signal_dim: usize, noise_dim: usize) -> Self {
        Self::from_matrix(&Matrix::zeros(signal_dim + noise_dim, signal_dim + noise_dim), 0.0, signal_dim)
    }

    /// Largest absolute entry over all five objects.
    pub fn max_abs(&self) -> f64 {
        [&self.q1, &self.q1_xi_a, &self.q1_xi_b, &self.q2]
            .iter()
            .flat_map(|m| m.iter())
            .fold(self.q0.abs(), |acc, x| acc.max(x.abs()))
    }
}

/// Time derivatives of the four K blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct KRates {
    pub dk_a: Matrix,
    pub dk_b: Matrix,
    pub dk_a_xi: Matrix,
    pub dk_b_xi: Matrix,
}

impl KRates {
    fn from_full(full_a: &Matrix, full_b: &Matrix, signal_dim: usize) -> Self {
        let n = full_a.ncols() - signal_dim;
        Self {
            dk_a: full_a.columns(0, signal_dim).into_owned(),
            dk_b: full_b.columns(0, signal_dim).into_owned(),
            dk_a_xi: full_a.columns(signal_dim, n).into_owned(),
            dk_b_xi: full_b.columns(signal_dim, n).into_owned(),
        }
    }

    /// `[dK_A | dK_{A,ξ}]` or the B counterpart.
    pub fn full(&self, side: Side) -> Matrix {
        let (s, n) = match side {
            Side::A => (&self.dk_a, &self.dk_a_xi),
            Side::B => (&self.dk_b, &self.dk_b_xi),
        };
        let mut f = Matrix::zeros(s.nrows(), s.ncols() + n.ncols());
        f.columns_mut(0, s.ncols()).copy_from(s);
        f.columns_mut(s.ncols(), n.ncols()).copy_from(n);
        f
    }

    /// Largest entrywise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        [
            (&self.dk_a, &other.dk_a),
            (&self.dk_b, &other.dk_b),
            (&self.dk_a_xi, &other.dk_a_xi),
            (&self.dk_b_xi, &other.dk_b_xi),
        ]
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        [&self.dk_a, &self.dk_b, &self.dk_a_xi, &self.dk_b_xi]
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0, |acc, x| acc.max(x.abs()))
    }
}

/// Gradients (or descent directions) with respect to `W_A` and `W_B`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub w_a: Matrix,
    pub w_b: Matrix,
}

impl GradientPair {
    /// Combined Frobenius norm.
    pub fn norm(&self) -> f64 {
        sqrt(self.w_a.norm_squared() + self.w_b.norm_squared())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            w_a: &self.w_a * factor,
            w_b: &self.w_b * factor,
        }
    }
}

fn check_variances(kstate: &KState, sigma_sq: &[f64]) -> Result<()> {
    if sigma_sq.len() != kstate.signal_dim {
        return Err(Error::DimensionMismatch(format!(
            "{} signal variances for r = {}",
            sigma_sq.len(),
            kstate.signal_dim
        )));
    }
    Ok(())
}

fn check_qset(kstate: &KState, qset: &QSet) -> Result<()> {
    let (r, n) = (kstate.signal_dim, kstate.noise_dim());
    let ok = qset.q1.shape() == (r, r)
        && qset.q1_xi_a.shape() == (n, r)
        && qset.q1_xi_b.shape() == (n, r)
        && qset.q2.shape() == (n, n);
    if !ok {
        return Err(Error::DimensionMismatch(format!(
            "QSet shapes do not match r = {r} and d - r = {n}"
        )));
    }
    Ok(())
}

/// Q coefficients of the contrastive loss.
pub fn compute_qset(
    kstate: &KState,
    tau_sq: f64,
    negatives: f64,
    strategy: &ExpectationStrategy,
) -> Result<QSet> {
    let moments = population_moments(
        kstate,
        tau_sq,
        negatives,
        LossKind::Contrastive,
        strategy,
        0,
        MomentRequest::Q,
    )?;
    Ok(qset_from_moments(&moments, kstate.signal_dim))
}

pub(crate) fn qset_from_moments(moments: &PopulationMoments, signal_dim: usize) -> QSet {
    let m = moments
        .q_matrix
        .as_ref()
        .expect("moments evaluated without the Q matrix");
    QSet::from_matrix(m, moments.q0.value, signal_dim)
}

/// Q coefficients of the non-contrastive loss: `Q_1 = I`, `Q_0 = −⟨K_A, K_B⟩/(N_A N_B d)`.
pub fn non_contrastive_qset(kstate: &KState) -> QSet {
    let d = kstate.ambient_dim();
    let mut m = Matrix::zeros(d, d);
    for p in 0..kstate.signal_dim {
        m[(p, p)] = 1.0;
    }
    let q0 = crate::expectation::non_contrastive_loss_closed_form(kstate);
    QSet::from_matrix(&m, q0, kstate.signal_dim)
}

/// The four block equations of the K dynamics, written out term by term.
pub fn krates_from_qset(
    kstate: &KState,
    qset: &QSet,
    sigma_sq: &[f64],
    sigma_xi_sq: f64,
) -> Result<KRates> {
    check_variances(kstate, sigma_sq)?;
    check_qset(kstate, qset)?;
    let d = kstate.ambient_dim() as f64;
    let (na, nb) = (kstate.norm_a, kstate.norm_b);
    let cross = 1.0 / (na * nb * d);
    let self_a = qset.q0 / (na * na * d);
    let self_b = qset.q0 / (nb * nb * d);
    let (k_a, k_b) = (kstate.signal(Side::A), kstate.signal(Side::B));
    let (k_a_xi, k_b_xi) = (kstate.noise(Side::A), kstate.noise(Side::B));
    let sigma = Matrix::from_diagonal(&Vector::from_column_slice(sigma_sq));

    let dk_a = ((&k_b * &qset.q1 + &k_b_xi * &qset.q1_xi_b) * cross + &k_a * self_a) * &sigma;
    let dk_b =
        ((&k_a * qset.q1.transpose() + &k_a_xi * &qset.q1_xi_a) * cross + &k_b * self_b) * &sigma;
    let dk_a_xi = ((&k_b * qset.q1_xi_a.transpose() + &k_b_xi * &qset.q2) * cross
        + &k_a_xi * self_a)
        * sigma_xi_sq;
    let dk_b_xi = ((&k_a * qset.q1_xi_b.transpose() + &k_a_xi * qset.q2.transpose()) * cross
        + &k_b_xi * self_b)
        * sigma_xi_sq;
    Ok(KRates {
        dk_a,
        dk_b,
        dk_a_xi,
        dk_b_xi,
    })
}

/// Descent direction `−τ⁻² ∇L` in weight space from the combined Q matrix.
///
/// `W_A` moves along `A_f Mᵀ K_Bᵀ/(N_A N_B d) + Q_0 A_f K_Aᵀ/(N_A² d)` and
/// `W_B` along the mirrored expression with `M`.
pub fn descent_from_qset(kstate: &KState, encoders: &EncoderSet, qset: &QSet) -> GradientPair {
    let m = qset.to_matrix();
    let d = kstate.ambient_dim() as f64;
    let (na, nb) = (kstate.norm_a, kstate.norm_b);
    let cross = 1.0 / (na * nb * d);
    let a_f = &encoders.full_a;
    let b_f = &encoders.full_b;
    // Both terms of each side share the right factor K^fullᵀ, so combine the
    // d×d left factors first.
    let left_a_cross = a_f * m.transpose() * cross;
    let left_b_cross = b_f * &m * cross;
    let w_a = left_a_cross * kstate.full_b.transpose()
        + a_f * kstate.full_a.transpose() * (qset.q0 / (na * na * d));
    let w_b = left_b_cross * kstate.full_a.transpose()
        + b_f * kstate.full_b.transpose() * (qset.q0 / (nb * nb * d));
    GradientPair { w_a, w_b }
}

/// `∇_{W_A} L` and `∇_{W_B} L` of the contrastive loss.
pub fn grad_contrastive(
    weights: &WeightState,
    encoders: &EncoderSet,
    tau_sq: f64,
    negatives: f64,
    strategy: &ExpectationStrategy,
) -> Result<GradientPair> {
    let kstate = compute_kstate(weights, encoders)?;
    let qset = compute_qset(&kstate, tau_sq, negatives, strategy)?;
    Ok(descent_from_qset(&kstate, encoders, &qset).scaled(-tau_sq))
}

/// `∇_{W_A} L̂` and `∇_{W_B} L̂` of the non-contrastive loss `−E⟨f_A⁺, f_B⁺⟩`.
///
/// The second moments `E[s_B s_Aᵀ]` and `E⟨f_A⁺, f_B⁺⟩` are evaluated under
/// `strategy`; exact evaluation reproduces `Q_1 = I` and the closed-form `Q_0`.
pub fn grad_non_contrastive(
    weights: &WeightState,
    encoders: &EncoderSet,
    strategy: &ExpectationStrategy,
) -> Result<GradientPair> {
    let kstate = compute_kstate(weights, encoders)?;
    let moments = population_moments(
        &kstate,
        1.0,
        0.0,
        LossKind::NonContrastive,
        strategy,
        0,
        MomentRequest::Q,
    )?;
    let qset = qset_from_moments(&moments, kstate.signal_dim);
    Ok(descent_from_qset(&kstate, encoders, &qset).scaled(-1.0))
}

/// Pushes a weight-space direction forward to `(dK_A^full, dK_B^full)`.
pub fn pushforward(direction: &GradientPair, encoders: &EncoderSet) -> (Matrix, Matrix) {
    (
        direction.w_a.transpose() * &encoders.full_a,
        direction.w_b.transpose() * &encoders.full_b,
    )
}

/// The K dynamics evaluated from their per-sample expectation form.
///
/// Every positive pair contributes the positive-pair term and the two
/// negative-pair terms with explicit sums over all `2^d` negative latents, so
/// this path shares no algebra with [`krates_from_qset`]. The outer
/// expectation follows `strategy`; the inner one is always enumerated.
pub fn krates_direct(
    weights: &WeightState,
    encoders: &EncoderSet,
    tau_sq: f64,
    negatives: f64,
    strategy: &ExpectationStrategy,
) -> Result<KRates> {
    let kstate = compute_kstate(weights, encoders)?;
    let d = kstate.ambient_dim();
    let (r, n) = (kstate.signal_dim, kstate.noise_dim());
    let mut source = Positives::new(r, n, strategy, 0)?;
    let inner = 1u64 << d;
    if u128::from(source.total()) * u128::from(inner) > strategy.budget {
        return Err(Error::BudgetExceeded {
            required: u128::from(source.total()) * u128::from(inner),
            budget: strategy.budget,
        });
    }
    let unit = 1.0 / sqrt(d as f64);
    let (na, nb) = (kstate.norm_a, kstate.norm_b);
    let latents: Vec<Vector> = (0..inner)
        .map(|idx| Vector::from_fn(d, |j, _| if idx >> j & 1 == 1 { unit } else { -unit }))
        .collect();
    let feats_a: Vec<Vector> = latents.iter().map(|u| &kstate.full_a * u / na).collect();
    let feats_b: Vec<Vector> = latents.iter().map(|u| &kstate.full_b * u / nb).collect();

    let mut acc_a = crate::math::CompensatedMatrix::zeros(kstate.width(), d);
    let mut acc_b = crate::math::CompensatedMatrix::zeros(kstate.width(), d);
    let mut count = 0u64;
    while let Some((sa, sb)) = source.next_partition() {
        for i in 0..sa.ncols() {
            let u_a: Vector = sa.column(i) * unit;
            let u_b: Vector = sb.column(i) * unit;
            let f_a = &kstate.full_a * &u_a / na;
            let f_b = &kstate.full_b * &u_b / nb;
            let positive = f_a.dot(&f_b);
            let e_pos = exp(tau_sq * positive);
            let w_neg_b: Vec<f64> = feats_b.iter().map(|g| exp(tau_sq * f_a.dot(g))).collect();
            let w_neg_a: Vec<f64> = feats_a.iter().map(|g| exp(tau_sq * f_b.dot(g))).collect();
            let z_a = w_neg_b.iter().sum::<f64>() / inner as f64;
            let z_b = w_neg_a.iter().sum::<f64>() / inner as f64;
            let s_a = e_pos / (e_pos + negatives * z_a);
            let s_b = e_pos / (e_pos + negatives * z_b);
            let c = 2.0 - s_a - s_b;

            // Positive-pair term.
            let mut da = (&f_b * u_a.transpose()) * (c / na)
                - &kstate.full_a * (c * positive / (na * na * d as f64));
            let mut db = (&f_a * u_b.transpose()) * (c / nb)
                - &kstate.full_b * (c * positive / (nb * nb * d as f64));
            // Negative-pair terms: the B-side negative inside S_A and the
            // A-side negative inside S_B.
            for k in 0..inner as usize {
                let wa = negatives * s_a * w_neg_b[k] / e_pos / inner as f64;
                let wb = negatives * s_b * w_neg_a[k] / e_pos / inner as f64;
                let g_b = &feats_b[k];
                let g_a = &feats_a[k];
                let ip_a = f_a.dot(g_b);
                let ip_b = g_a.dot(&f_b);
                da -= (g_b * u_a.transpose()) * (wa / na)
                    - &kstate.full_a * (wa * ip_a / (na * na * d as f64));
                da -= (&f_b * latents[k].transpose()) * (wb / na)
                    - &kstate.full_a * (wb * ip_b / (na * na * d as f64));
                db -= (g_a * u_b.transpose()) * (wb / nb)
                    - &kstate.full_b * (wb * ip_b / (nb * nb * d as f64));
                db -= (&f_a * latents[k].transpose()) * (wa / nb)
                    - &kstate.full_b * (wa * ip_a / (nb * nb * d as f64));
            }
            acc_a.add(&da);
            acc_b.add(&db);
            count += 1;
        }
    }
    let scales = encoders.column_variances();
    let finish = |acc: crate::math::CompensatedMatrix| {
        let mut m = acc.value() / count as f64;
        for (j, s) in scales.iter().enumerate() {
            m.column_mut(j).scale_mut(*s);
        }
        m
    };
    Ok(KRates::from_full(&finish(acc_a), &finish(acc_b), r))
}

/// Per-column squared-norm rates and unit-vector rates of one K block.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnRates {
    pub norm_sq: Vec<f64>,
    /// Column `p` is `d/dt (K_p / ‖K_p‖)`.
    pub unit: Matrix,
}

/// Radial and tangent decomposition of all four K blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialTangentRates {
    pub k_a: ColumnRates,
    pub k_b: ColumnRates,
    pub k_a_xi: ColumnRates,
    pub k_b_xi: ColumnRates,
}

/// Splits each column's motion into `d/dt ‖K_p‖²` and the motion of `K_p/‖K_p‖`.
///
/// For a column with cross-drive `v_p` (the `Q_1`/`Q_{1,ξ}`/`Q_2` terms) and
/// self-coefficient `Q_0 σ²/(N² d)`, the norm rate is
/// `2⟨K_p, v_p⟩ + 2‖K_p‖² Q_0 σ²/(N² d)` and the unit vector moves along
/// `(I − k̄ k̄ᵀ) v_p / ‖K_p‖`; the self term is purely radial.
pub fn radial_tangent_rates(
    kstate: &KState,
    qset: &QSet,
    sigma_sq: &[f64],
    sigma_xi_sq: f64,
) -> Result<RadialTangentRates> {
    check_variances(kstate, sigma_sq)?;
    check_qset(kstate, qset)?;
    let d = kstate.ambient_dim() as f64;
    let (na, nb) = (kstate.norm_a, kstate.norm_b);
    let cross = 1.0 / (na * nb * d);
    let (k_a, k_b) = (kstate.signal(Side::A), kstate.signal(Side::B));
    let (k_a_xi, k_b_xi) = (kstate.noise(Side::A), kstate.noise(Side::B));
    let noise_scales = alloc::vec![sigma_xi_sq; kstate.noise_dim()];

    let blocks: [(&'static str, &Matrix, Matrix, f64, &[f64]); 4] = [
        ("K_A", &k_a, &k_b * &qset.q1 + &k_b_xi * &qset.q1_xi_b, na, sigma_sq),
        (
            "K_B",
            &k_b,
            &k_a * qset.q1.transpose() + &k_a_xi * &qset.q1_xi_a,
            nb,
            sigma_sq,
        ),
        (
            "K_A_xi",
            &k_a_xi,
            &k_b * qset.q1_xi_a.transpose() + &k_b_xi * &qset.q2,
            na,
            &noise_scales,
        ),
        (
            "K_B_xi",
            &k_b_xi,
            &k_a * qset.q1_xi_b.transpose() + &k_a_xi * qset.q2.transpose(),
            nb,
            &noise_scales,
        ),
    ];
    let mut out = Vec::with_capacity(4);
    for (name, k, drive, norm, scales) in blocks {
        let mut norm_sq = Vec::with_capacity(k.ncols());
        let mut unit = Matrix::zeros(k.nrows(), k.ncols());
        for p in 0..k.ncols() {
            let col = k.column(p);
            let len_sq = col.norm_squared();
            if !(len_sq > 0.0) {
                return Err(Error::DegenerateColumn {
                    matrix: name,
                    index: p,
                });
            }
            let len = sqrt(len_sq);
            let v = drive.column(p);
            let s = scales[p];
            norm_sq.push(
                2.0 * col.dot(&v) * cross * s + 2.0 * len_sq * qset.q0 * s / (norm * norm * d),
            );
            let bar = col / len;
            let tangent = (&v - &bar * bar.dot(&v)) * (s * cross / len);
            unit.column_mut(p).copy_from(&tangent);
        }
        out.push(ColumnRates { norm_sq, unit });
    }
    let mut it = out.into_iter();
    Ok(RadialTangentRates {
        k_a: it.next().expect("four blocks"),
        k_b: it.next().expect("four blocks"),
        k_a_xi: it.next().expect("four blocks"),
        k_b_xi: it.next().expect("four blocks"),
    })
}

/// Error of central finite differences at one step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FdStepError {
    pub step: f64,
    /// `‖g_fd − g‖_∞ / ‖g‖_∞` of the plain central difference.
    pub central: f64,
    /// Same for the Richardson combination of steps `h` and `h/2`.
    pub richardson: f64,
}

/// Finite-difference audit of a closed-form gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub per_step: Vec<FdStepError>,
    /// Smallest error over all steps and both schemes.
    pub best: f64,
    pub gradient_max_abs: f64,
}

fn loss_of(
    weights: &WeightState,
    encoders: &EncoderSet,
    kind: LossKind,
    tau_sq: f64,
    negatives: f64,
) -> Result<f64> {
    let kstate = compute_kstate(weights, encoders)?;
    let exact = ExpectationStrategy::exact();
    Ok(match kind {
        LossKind::Contrastive => contrastive_loss(&kstate, tau_sq, negatives, &exact)?.value,
        LossKind::NonContrastive => non_contrastive_loss(&kstate, &exact)?.value,
    })
}

/// Compares the closed-form gradient against central differences of the
/// exactly enumerated loss at each step size.
pub fn finite_difference_audit(
    weights: &WeightState,
    encoders: &EncoderSet,
    kind: LossKind,
    tau_sq: f64,
    negatives: f64,
    steps: &[f64],
) -> Result<FdReport> {
    let exact = ExpectationStrategy::exact();
    let grad = match kind {
        LossKind::Contrastive => grad_contrastive(weights, encoders, tau_sq, negatives, &exact)?,
        LossKind::NonContrastive => grad_non_contrastive(weights, encoders, &exact)?,
    };
    let scale = grad
        .w_a
        .iter()
        .chain(grad.w_b.iter())
        .fold(0.0_f64, |a, x| a.max(x.abs()));
    let central = |h: f64| -> Result<GradientPair> {
        let mut out = GradientPair {
            w_a: Matrix::zeros(weights.w_a.nrows(), weights.w_a.ncols()),
            w_b: Matrix::zeros(weights.w_b.nrows(), weights.w_b.ncols()),
        };
        for side in [Side::A, Side::B] {
            let (rows, cols) = weights.get(side).shape();
            for i in 0..rows {
                for j in 0..cols {
                    let mut plus = weights.clone();
                    plus.get_mut(side)[(i, j)] += h;
                    let mut minus = weights.clone();
                    minus.get_mut(side)[(i, j)] -= h;
                    let diff = loss_of(&plus, encoders, kind, tau_sq, negatives)?
                        - loss_of(&minus, encoders, kind, tau_sq, negatives)?;
                    let target = match side {
                        Side::A => &mut out.w_a,
                        Side::B => &mut out.w_b,
                    };
                    target[(i, j)] = diff / (2.0 * h);
                }
            }
        }
        Ok(out)
    };
    let error = |fd: &GradientPair| {
        let diff = fd
            .w_a
            .iter()
            .chain(fd.w_b.iter())
            .zip(grad.w_a.iter().chain(grad.w_b.iter()))
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        diff / scale.max(f64::MIN_POSITIVE)
    };
    let mut per_step = Vec::with_capacity(steps.len());
    for &h in steps {
        let full = central(h)?;
        let half = central(h / 2.0)?;
        let extrapolated = GradientPair {
            w_a: (&half.w_a * 4.0 - &full.w_a) / 3.0,
            w_b: (&half.w_b * 4.0 - &full.w_b) / 3.0,
        };
        per_step.push(FdStepError {
            step: h,
            central: error(&full),
            richardson: error(&extrapolated),
        });
    }
    let best = per_step
        .iter()
        .flat_map(|e| [e.central, e.richardson])
        .fold(f64::INFINITY, f64::min);
    Ok(FdReport {
        per_step,
        best,
        gradient_max_abs: scale,
    })
}

/// Cosine similarity of two matrices under the Frobenius inner product.
pub fn cosine(x: &Matrix, y: &Matrix) -> f64 {
    let denom = sqrt(x.norm_squared() * y.norm_squared());
    if denom == 0.0 {
        return 0.0;
    }
    frobenius_dot(x, y) / denom
}

/// Weight of the positive-pair term at `τ² = 0`: `2K/(1+K)`.
pub fn zero_temperature_weight(negatives: f64) -> f64 {
    2.0 * negatives / (1.0 + negatives)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_encoders, init_weights, rng_for, ModelConfig, SigmaSpec, Stream};

    fn setup(d: usize, r: usize, m: usize, seed: u64) -> (ModelConfig, EncoderSet, WeightState) {
        let cfg = ModelConfig {
            signal_variances: SigmaSpec::Values((0..r).map(|p| 1.0 + 0.5 * p as f64).collect()),
            noise_variance: 0.7,
            ..ModelConfig::flat(d, r, m, seed)
        };
        let enc = build_encoders(&cfg, &mut rng_for(seed, Stream::Encoders)).unwrap();
        let w = init_weights(&cfg, &mut rng_for(seed, Stream::Weights));
        (cfg, enc, w)
    }

    #[test]
    fn qset_matrix_round_trip() {
        let m = Matrix::from_fn(5, 5, |i, j| (i * 5 + j) as f64);
        let q = QSet::from_matrix(&m, 0.5, 2);
        assert_eq!(q.to_matrix(), m);
        assert_eq!(q.q1_xi_a.shape(), (3, 2));
        assert_eq!(q.q1_xi_a[(0, 1)], m[(1, 2)]);
    }

    #[test]
    fn zero_qset_gives_zero_rates() {
        let (cfg, enc, w) = setup(5, 2, 4, 1);
        let k = compute_kstate(&w, &enc).unwrap();
        let rates = krates_from_qset(&k, &QSet::zeros(2, 3), &cfg.sigma_sq().unwrap(), 0.7).unwrap();
        assert_eq!(rates.max_abs(), 0.0);
        let rt = radial_tangent_rates(&k, &QSet::zeros(2, 3), &cfg.sigma_sq().unwrap(), 0.7).unwrap();
        assert!(rt.k_a.norm_sq.iter().all(|x| *x == 0.0));
        assert_eq!(rt.k_b_xi.unit.amax(), 0.0);
    }

    #[test]
    fn weight_direction_pushes_forward_to_krates() {
        let (cfg, enc, w) = setup(5, 2, 4, 2);
        let k = compute_kstate(&w, &enc).unwrap();
        let q = compute_qset(&k, 0.8, 1.5, &ExpectationStrategy::exact()).unwrap();
        let rates = krates_from_qset(&k, &q, &cfg.sigma_sq().unwrap(), 0.7).unwrap();
        let dir = descent_from_qset(&k, &enc, &q);
        let (da, db) = pushforward(&dir, &enc);
        assert!((da - rates.full(Side::A)).amax() < 1e-13);
        assert!((db - rates.full(Side::B)).amax() < 1e-13);
    }

    #[test]
    fn no_negatives_gives_zero_gradient() {
        let (_, enc, w) = setup(4, 2, 3, 3);
        let g = grad_contrastive(&w, &enc, 0.5, 0.0, &ExpectationStrategy::exact()).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn radial_rates_match_chain_rule_and_tangent_is_orthogonal() {
        let (cfg, enc, w) = setup(5, 2, 4, 4);
        let k = compute_kstate(&w, &enc).unwrap();
        let sigma = cfg.sigma_sq().unwrap();
        let q = compute_qset(&k, 1.0, 1.0, &ExpectationStrategy::exact()).unwrap();
        let rates = krates_from_qset(&k, &q, &sigma, 0.7).unwrap();
        let rt = radial_tangent_rates(&k, &q, &sigma, 0.7).unwrap();
        let pairs = [
            (&rt.k_a, k.signal(Side::A), &rates.dk_a),
            (&rt.k_b, k.signal(Side::B), &rates.dk_b),
            (&rt.k_a_xi, k.noise(Side::A), &rates.dk_a_xi),
            (&rt.k_b_xi, k.noise(Side::B), &rates.dk_b_xi),
        ];
        for (cr, block, drate) in pairs {
            for p in 0..block.ncols() {
                let chain = 2.0 * block.column(p).dot(&drate.column(p));
                assert!((chain - cr.norm_sq[p]).abs() < 1e-12);
                let bar = block.column(p) / block.column(p).norm();
                assert!(bar.dot(&cr.unit.column(p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_column_reported() {
        let mut ka = Matrix::identity(3, 3);
        ka[(1, 1)] = 0.0;
        let k = KState::from_full(ka, Matrix::identity(3, 3), 2).unwrap();
        let err = radial_tangent_rates(&k, &QSet::zeros(2, 1), &[1.0, 1.0], 1.0);
        assert_eq!(
            err,
            Err(Error::DegenerateColumn {
                matrix: "K_A",
                index: 1
            })
        );
    }
}
