//! Population expectations over the discrete latent hypercubes.
//!
//! The outer expectation runs over positive pairs `(z, ξ_A, ξ_B)`, either by
//! exhaustive enumeration or by seeded sampling. The inner expectation over a
//! negative input inside `S_A` and `S_B` factorizes over sign coordinates:
//! with `α = G_AB^T s_A / (d N_A N_B)` (signs `s ∈ {±1}^d`, `G_AB = K_A^T K_B`)
//!
//! ```text
//! E_{s⁻} exp(τ² α·s⁻) = Π_j cosh(τ² α_j),   tilted mean of s⁻_j = tanh(τ² α_j)
//! ```
//!
//! so every inner expectation is exact regardless of the outer mode.
//!
//! Samples are processed in fixed partitions of [`PARTITION`] positives whose
//! partial sums are combined with compensated summation in index order, so
//! estimates are bit-reproducible for a given seed.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cosh_tanh_parts, ln, sigmoid, softplus, sqrt, CompensatedMatrix, CompensatedSum, LN_2};
use crate::model::{fill_signs, substream, KState, SignVector, Side};
use crate::Matrix;

/// Default cap on the number of integrand evaluations in exact mode.
pub const DEFAULT_BUDGET: u128 = 1 << 24;

/// Number of positives per summation partition.
pub const PARTITION: usize = 512;

/// How outer expectations are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationMode {
    Exact,
    MonteCarlo,
}

fn default_budget() -> u128 {
    DEFAULT_BUDGET
}

/// Exact enumeration or seeded Monte Carlo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectationStrategy {
    pub mode: ExpectationMode,
    #[serde(default)]
    pub mc_samples: u64,
    #[serde(default)]
    pub mc_seed: u64,
    #[serde(default = "default_budget")]
    pub budget: u128,
}

impl ExpectationStrategy {
    pub fn exact() -> Self {
        Self {
            mode: ExpectationMode::Exact,
            mc_samples: 0,
            mc_seed: 0,
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn monte_carlo(samples: u64, seed: u64) -> Self {
        Self {
            mode: ExpectationMode::MonteCarlo,
            mc_samples: samples,
            mc_seed: seed,
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn with_budget(self, budget: u128) -> Self {
        Self { budget, ..self }
    }

    /// Same strategy with the sample seed replaced.
    pub fn reseeded(self, mc_seed: u64) -> Self {
        Self { mc_seed, ..self }
    }

    /// Exact if `2^log2_count` fits the budget, otherwise this strategy.
    pub fn exact_if_within(self, log2_count: u32) -> Self {
        if log2_count < 127 && (1u128 << log2_count) <= self.budget {
            Self {
                mode: ExpectationMode::Exact,
                ..self
            }
        } else {
            self
        }
    }

    fn check(&self) -> Result<()> {
        if self.mode == ExpectationMode::MonteCarlo && self.mc_samples < 2 {
            return Err(Error::InvalidConfig(alloc::format!(
                "Monte Carlo needs at least 2 samples, got {}",
                self.mc_samples
            )));
        }
        Ok(())
    }

    pub(crate) fn require_exact(&self, log2_count: u32) -> Result<()> {
        let required = if log2_count < 127 {
            1u128 << log2_count
        } else {
            u128::MAX
        };
        if required > self.budget {
            return Err(Error::BudgetExceeded {
                required,
                budget: self.budget,
            });
        }
        Ok(())
    }
}

impl Default for ExpectationStrategy {
    fn default() -> Self {
        Self::exact()
    }
}

/// Which population loss is being differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    NonContrastive,
}

/// A point estimate with its standard error (zero for exact evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            std_err: 0.0,
        }
    }

    fn from_sums(sum: f64, sum_sq: f64, count: u64, sampled: bool) -> Self {
        let n = count as f64;
        let value = sum / n;
        let std_err = if sampled && count > 1 {
            let var = ((sum_sq - n * value * value) / (n - 1.0)).max(0.0);
            sqrt(var / n)
        } else {
            0.0
        };
        Self { value, std_err }
    }
}

/// A positive pair `(z, ξ_A, ξ_B)` in sign form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositivePair {
    pub z: SignVector,
    pub xi_a: SignVector,
    pub xi_b: SignVector,
}

impl PositivePair {
    pub fn from_quad(quad: &crate::model::SampleQuad) -> Self {
        Self {
            z: quad.z_pos.clone(),
            xi_a: quad.xi_a_pos.clone(),
            xi_b: quad.xi_b_pos.clone(),
        }
    }

    /// Full latent signs `(z, ξ)` of one side.
    pub fn signs(&self, side: Side) -> Vec<f64> {
        let xi = match side {
            Side::A => &self.xi_a,
            Side::B => &self.xi_b,
        };
        self.z
            .0
            .iter()
            .chain(xi.0.iter())
            .map(|&s| f64::from(s))
            .collect()
    }
}

/// Enumerated or sampled positive pairs delivered in partitions.
///
/// Each partition is a pair of `d×P` sign matrices whose columns are the
/// A-side latent `(z, ξ_A)` and the B-side latent `(z, ξ_B)`.
pub(crate) struct Positives<R> {
    signal_dim: usize,
    noise_dim: usize,
    total: u64,
    next: u64,
    rng: Option<R>,
}

fn sign(bit: u64) -> f64 {
    if bit & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

impl Positives<rand_chacha::ChaCha8Rng> {
    pub(crate) fn new(
        signal_dim: usize,
        noise_dim: usize,
        strategy: &ExpectationStrategy,
        stream: u64,
    ) -> Result<Self> {
        strategy.check()?;
        match strategy.mode {
            ExpectationMode::Exact => {
                let bits = (signal_dim + 2 * noise_dim) as u32;
                strategy.require_exact(bits)?;
                if bits >= 63 {
                    return Err(Error::BudgetExceeded {
                        required: u128::MAX,
                        budget: strategy.budget,
                    });
                }
                Ok(Self {
                    signal_dim,
                    noise_dim,
                    total: 1u64 << bits,
                    next: 0,
                    rng: None,
                })
            }
            ExpectationMode::MonteCarlo => Ok(Self {
                signal_dim,
                noise_dim,
                total: strategy.mc_samples,
                next: 0,
                rng: Some(substream(strategy.mc_seed, stream)),
            }),
        }
    }
}

impl<R: RngCore> Positives<R> {
    pub(crate) fn total(&self) -> u64 {
        self.total
    }

    pub(crate) fn sampled(&self) -> bool {
        self.rng.is_some()
    }

    pub(crate) fn next_partition(&mut self) -> Option<(Matrix, Matrix)> {
        if self.next >= self.total {
            return None;
        }
        let count = (self.total - self.next).min(PARTITION as u64) as usize;
        let (r, n) = (self.signal_dim, self.noise_dim);
        let d = r + n;
        let mut sa = Matrix::zeros(d, count);
        let mut sb = Matrix::zeros(d, count);
        for col in 0..count {
            match self.rng.as_mut() {
                None => {
                    let idx = self.next + col as u64;
                    for j in 0..r {
                        let v = sign(idx >> j);
                        sa[(j, col)] = v;
                        sb[(j, col)] = v;
                    }
                    for j in 0..n {
                        sa[(r + j, col)] = sign(idx >> (r + j));
                        sb[(r + j, col)] = sign(idx >> (r + n + j));
                    }
                }
                Some(rng) => {
                    fill_pair(rng, r, column_mut(&mut sa, col), column_mut(&mut sb, col));
                }
            }
        }
        self.next += count as u64;
        Some((sa, sb))
    }
}

/// Which pieces of [`population_moments`] to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MomentRequest {
    /// Accumulate the combined Q matrix and `Q_0`.
    pub q: bool,
    /// Accumulate per-entry second moments for standard errors.
    pub variance: bool,
}

impl MomentRequest {
    pub const LOSS: Self = Self {
        q: false,
        variance: false,
    };
    pub const Q: Self = Self {
        q: true,
        variance: false,
    };
    pub const Q_WITH_VARIANCE: Self = Self {
        q: true,
        variance: true,
    };
}

/// Loss value and the Q coefficients of one population evaluation.
///
/// `q_matrix` is the `d×d` matrix whose rows index the B-side latent
/// `(z, ξ_B)` and whose columns index the A-side latent `(z, ξ_A)`:
///
/// ```text
/// q_matrix = E[ c s_B s_Aᵀ − (1 − S_A) t_A s_Aᵀ − (1 − S_B) s_B t_Bᵀ ],  c = 2 − S_A − S_B
/// ```
///
/// where `t_A` and `t_B` are the tilted means of the negative signs. Its
/// blocks are `Q_1`, `Q_{1,ξB}`, `Q_{1,ξA}ᵀ` and `Q_2`; `q0` is `Q_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMoments {
    pub loss: Estimate,
    pub q0: Estimate,
    pub q_matrix: Option<Matrix>,
    pub q_matrix_std_err: Option<Matrix>,
    pub samples: u64,
}

struct Accumulator {
    loss: CompensatedSum,
    loss_sq: CompensatedSum,
    q0: CompensatedSum,
    q0_sq: CompensatedSum,
    matrix: Option<CompensatedMatrix>,
    matrix_sq: Option<CompensatedMatrix>,
    count: u64,
}

impl Accumulator {
    fn new(dim: usize, request: MomentRequest) -> Self {
        Self {
            loss: CompensatedSum::new(),
            loss_sq: CompensatedSum::new(),
            q0: CompensatedSum::new(),
            q0_sq: CompensatedSum::new(),
            matrix: request.q.then(|| CompensatedMatrix::zeros(dim, dim)),
            matrix_sq: (request.q && request.variance).then(|| CompensatedMatrix::zeros(dim, dim)),
            count: 0,
        }
    }

    fn finish(self, sampled: bool) -> PopulationMoments {
        let n = self.count;
        let matrix = self.matrix.map(|m| m.value() / n as f64);
        let matrix_std_err = match (&matrix, self.matrix_sq) {
            (Some(mean), Some(sq)) if sampled && n > 1 => {
                let nf = n as f64;
                let sq = sq.value();
                Some(Matrix::from_fn(mean.nrows(), mean.ncols(), |i, j| {
                    let m = mean[(i, j)];
                    let var = ((sq[(i, j)] - nf * m * m) / (nf - 1.0)).max(0.0);
                    sqrt(var / nf)
                }))
            }
            (Some(mean), Some(_)) => Some(Matrix::zeros(mean.nrows(), mean.ncols())),
            _ => None,
        };
        PopulationMoments {
            loss: Estimate::from_sums(self.loss.value(), self.loss_sq.value(), n, sampled),
            q0: Estimate::from_sums(self.q0.value(), self.q0_sq.value(), n, sampled),
            q_matrix: matrix,
            q_matrix_std_err: matrix_std_err,
            samples: n,
        }
    }
}

/// Inner-expectation quantities of one side for one positive.
struct Tilt {
    /// `ln E exp(τ² α·s⁻)`.
    log_partition: f64,
}

/// Fills `tilt` with `tanh(τ² α_j)` and returns `ln Π cosh(τ² α_j)`.
fn tilt_into(alpha: &[f64], tau_sq: f64, tilt: &mut [f64]) -> Tilt {
    let mut product = 1.0;
    let mut abs_sum = 0.0;
    for (t, &a) in tilt.iter_mut().zip(alpha) {
        let x = tau_sq * a;
        let (factor, th) = cosh_tanh_parts(x);
        product *= factor;
        abs_sum += x.abs();
        *t = th;
    }
    Tilt {
        log_partition: abs_sum + ln(product) - alpha.len() as f64 * LN_2,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evaluates the population loss and, on request, the Q coefficients.
///
/// `stream` selects the sample substream in Monte Carlo mode; every
/// quantity of one call shares the same positives.
pub fn population_moments(
    kstate: &KState,
    tau_sq: f64,
    negatives: f64,
    kind: LossKind,
    strategy: &ExpectationStrategy,
    stream: u64,
    request: MomentRequest,
) -> Result<PopulationMoments> {
    let d = kstate.ambient_dim();
    let mut source = Positives::new(kstate.signal_dim, kstate.noise_dim(), strategy, stream)?;
    let scale = 1.0 / (d as f64 * kstate.norm_a * kstate.norm_b);
    let g_ab = (kstate.full_a.transpose() * &kstate.full_b) * scale;
    let g_ba = g_ab.transpose();
    let ln_k = ln(negatives);
    let mut acc = Accumulator::new(d, request);
    let sampled = source.sampled();

    while let Some((sa, sb)) = source.next_partition() {
        let count = sa.ncols();
        // Column i of alpha is G_AB^T s_A / (d N_A N_B); beta uses G_AB s_B.
        let alpha = &g_ba * &sa;
        let beta = &g_ab * &sb;
        let q_cols = if request.q { count } else { 0 };
        let mut left = Matrix::zeros(d, q_cols);
        let mut right = Matrix::zeros(d, q_cols);
        let tilt_cols = if kind == LossKind::Contrastive { count } else { 0 };
        let mut tilt_a = Matrix::zeros(d, tilt_cols);
        let mut tilt_b = vec![0.0; d];
        for i in 0..count {
            let a = alpha.column(i);
            let b = beta.column(i);
            let s_a = sa.column(i);
            let s_b = sb.column(i);
            let positive = dot(a.as_slice(), s_b.as_slice());
            let (loss, q0) = match kind {
                LossKind::NonContrastive => {
                    if request.q {
                        right.column_mut(i).copy_from(&s_a);
                    }
                    (-positive, -positive)
                }
                LossKind::Contrastive => {
                    let ta = tilt_into(a.as_slice(), tau_sq, tilt_a.column_mut(i).as_mut_slice());
                    let tb = tilt_into(b.as_slice(), tau_sq, &mut tilt_b);
                    // 1 − S = K E exp(τ² f·f⁻) / (exp(τ² f·f⁺) + K E exp(τ² f·f⁻)).
                    let logit_a = ln_k + ta.log_partition - tau_sq * positive;
                    let logit_b = ln_k + tb.log_partition - tau_sq * positive;
                    let w_a = sigmoid(logit_a);
                    let w_b = sigmoid(logit_b);
                    let c = w_a + w_b;
                    let q0 = -c * positive
                        + w_a * dot(a.as_slice(), tilt_a.column(i).as_slice())
                        + w_b * dot(b.as_slice(), &tilt_b);
                    if request.q {
                        for j in 0..d {
                            right[(j, i)] = c * s_a[j] - w_b * tilt_b[j];
                            left[(j, i)] = w_a * s_a[j];
                        }
                    }
                    (softplus(logit_a) + softplus(logit_b), q0)
                }
            };
            acc.loss.add(loss);
            acc.loss_sq.add(loss * loss);
            acc.q0.add(q0);
            acc.q0_sq.add(q0 * q0);
            if request.q {
                if let Some(sq) = acc.matrix_sq.as_mut() {
                    let mut single = Matrix::zeros(d, d);
                    for row in 0..d {
                        for col in 0..d {
                            let mut v = s_b[row] * right[(col, i)];
                            if kind == LossKind::Contrastive {
                                v -= tilt_a[(row, i)] * left[(col, i)];
                            }
                            single[(row, col)] = v * v;
                        }
                    }
                    sq.add(&single);
                }
            }
        }
        if let Some(m) = acc.matrix.as_mut() {
            let mut part = &sb * right.transpose();
            if kind == LossKind::Contrastive {
                part -= &tilt_a * left.transpose();
            }
            m.add(&part);
        }
        acc.count += count as u64;
    }
    Ok(acc.finish(sampled))
}

/// Population contrastive loss `−E ln S_A − E ln S_B`.
pub fn contrastive_loss(
    kstate: &KState,
    tau_sq: f64,
    negatives: f64,
    strategy: &ExpectationStrategy,
) -> Result<Estimate> {
    Ok(population_moments(
        kstate,
        tau_sq,
        negatives,
        LossKind::Contrastive,
        strategy,
        0,
        MomentRequest::LOSS,
    )?
    .loss)
}

/// `−⟨K_A, K_B⟩ / (N_A N_B d)`; only the shared signal block contributes.
pub fn non_contrastive_loss_closed_form(kstate: &KState) -> f64 {
    let d = kstate.ambient_dim() as f64;
    let r = kstate.signal_dim;
    let inner: f64 = kstate
        .full_a
        .columns(0, r)
        .iter()
        .zip(kstate.full_b.columns(0, r).iter())
        .map(|(a, b)| a * b)
        .sum();
    -inner / (kstate.norm_a * kstate.norm_b * d)
}

/// Population non-contrastive loss `−E⟨f_A⁺, f_B⁺⟩` evaluated under `strategy`.
pub fn non_contrastive_loss(kstate: &KState, strategy: &ExpectationStrategy) -> Result<Estimate> {
    Ok(population_moments(
        kstate,
        1.0,
        0.0,
        LossKind::NonContrastive,
        strategy,
        0,
        MomentRequest::LOSS,
    )?
    .loss)
}

/// `S_A` (or `S_B` for `side = B`) at one positive pair.
///
/// Exact mode uses the product-of-cosh form of the inner expectation; Monte
/// Carlo mode averages `exp(τ² f⁺·f⁻)` over sampled negatives.
pub fn softmax_score(
    kstate: &KState,
    tau_sq: f64,
    negatives: f64,
    positive: &PositivePair,
    side: Side,
    strategy: &ExpectationStrategy,
) -> Result<Estimate> {
    let d = kstate.ambient_dim();
    if positive.z.len() != kstate.signal_dim
        || positive.xi_a.len() != kstate.noise_dim()
        || positive.xi_b.len() != kstate.noise_dim()
    {
        return Err(Error::DimensionMismatch(alloc::format!(
            "positive pair lengths do not match r = {} and d = {}",
            kstate.signal_dim,
            d
        )));
    }
    strategy.check()?;
    let scale = 1.0 / (d as f64 * kstate.norm_a * kstate.norm_b);
    let g_ab = (kstate.full_a.transpose() * &kstate.full_b) * scale;
    let s_a = crate::Vector::from_vec(positive.signs(Side::A));
    let s_b = crate::Vector::from_vec(positive.signs(Side::B));
    // The anchor's feature is fixed; the opposite side is resampled.
    let alpha = match side {
        Side::A => g_ab.transpose() * &s_a,
        Side::B => &g_ab * &s_b,
    };
    let positive_score = match side {
        Side::A => alpha.dot(&s_b),
        Side::B => alpha.dot(&s_a),
    };
    match strategy.mode {
        ExpectationMode::Exact => {
            strategy.require_exact(d as u32)?;
            let mut tilt = vec![0.0; d];
            let t = tilt_into(alpha.as_slice(), tau_sq, &mut tilt);
            let logit = ln(negatives) + t.log_partition - tau_sq * positive_score;
            Ok(Estimate::exact(sigmoid(-logit)))
        }
        ExpectationMode::MonteCarlo => {
            let mut rng = substream(strategy.mc_seed, 0);
            let n = strategy.mc_samples;
            // Ratios exp(τ²(f⁺·f⁻ − f⁺·f_pos)) keep the average well scaled.
            let mut sum = CompensatedSum::new();
            let mut sum_sq = CompensatedSum::new();
            for _ in 0..n {
                let neg = SignVector::random(d, &mut rng);
                let score: f64 = alpha
                    .iter()
                    .zip(neg.0.iter())
                    .map(|(a, &s)| a * f64::from(s))
                    .sum();
                let ratio = crate::math::exp(tau_sq * (score - positive_score));
                sum.add(ratio);
                sum_sq.add(ratio * ratio);
            }
            let mean = Estimate::from_sums(sum.value(), sum_sq.value(), n, true);
            let denom = 1.0 + negatives * mean.value;
            // Delta method for S = 1 / (1 + K m).
            Ok(Estimate {
                value: 1.0 / denom,
                std_err: negatives * mean.std_err / (denom * denom),
            })
        }
    }
}

/// Quadratic form `sᵀ G s` with a fixed summation order.
fn quad_form(g: &Matrix, s: &[f64]) -> f64 {
    let mut total = 0.0;
    for (j, sj) in s.iter().enumerate() {
        let col = g.column(j);
        total += sj * dot(col.as_slice(), s);
    }
    total
}

/// Squared feature distances expressed through the Gram matrices.
struct DistanceForms {
    aa: Matrix,
    bb: Matrix,
    /// `G_AB / (d N_A N_B)`.
    ab: Matrix,
}

impl DistanceForms {
    fn new(kstate: &KState) -> Self {
        let d = kstate.ambient_dim() as f64;
        let g = kstate.grams();
        Self {
            aa: g.aa / (d * kstate.norm_a * kstate.norm_a),
            bb: g.bb / (d * kstate.norm_b * kstate.norm_b),
            ab: g.ab / (d * kstate.norm_a * kstate.norm_b),
        }
    }
}

/// Alignment score: probability that a positive pair is strictly closer
/// than a pair with one side resampled, averaged over both sides.
pub fn alignment_score(kstate: &KState, strategy: &ExpectationStrategy) -> Result<Estimate> {
    strategy.check()?;
    let d = kstate.ambient_dim();
    let (r, n) = (kstate.signal_dim, kstate.noise_dim());
    let forms = DistanceForms::new(kstate);
    let ab_t = forms.ab.transpose();
    match strategy.mode {
        ExpectationMode::Exact => {
            strategy.require_exact((r + 2 * n + d) as u32)?;
            let negs: Vec<Vec<f64>> = (0..1u64 << d)
                .map(|idx| (0..d).map(|j| sign(idx >> j)).collect())
                .collect();
            let q_a_neg: Vec<f64> = negs.iter().map(|s| quad_form(&forms.aa, s)).collect();
            let q_b_neg: Vec<f64> = negs.iter().map(|s| quad_form(&forms.bb, s)).collect();
            let mut source = Positives::new(r, n, &ExpectationStrategy::exact().with_budget(u128::MAX), 0)?;
            let mut wins = 0u64;
            while let Some((sa, sb)) = source.next_partition() {
                for i in 0..sa.ncols() {
                    let s_a = sa.column(i);
                    let s_b = sb.column(i);
                    let alpha = &ab_t * s_a;
                    let beta = &forms.ab * s_b;
                    let qa = quad_form(&forms.aa, s_a.as_slice());
                    let qb = quad_form(&forms.bb, s_b.as_slice());
                    // Each comparison evaluates the positive distance in the
                    // same form as its competitor, so ties are exact.
                    let pos_a = qa + qb - 2.0 * dot(alpha.as_slice(), s_b.as_slice());
                    let pos_b = qa + qb - 2.0 * dot(beta.as_slice(), s_a.as_slice());
                    for (k, s) in negs.iter().enumerate() {
                        let d1 = qa + q_b_neg[k] - 2.0 * dot(alpha.as_slice(), s);
                        let d2 = q_a_neg[k] + qb - 2.0 * dot(beta.as_slice(), s);
                        wins += u64::from(pos_a < d1) + u64::from(pos_b < d2);
                    }
                }
            }
            let total = (source.total() as f64) * (1u64 << d) as f64 * 2.0;
            Ok(Estimate::exact(wins as f64 / total))
        }
        ExpectationMode::MonteCarlo => {
            let mut rng = substream(strategy.mc_seed, 0);
            let mut sum = CompensatedSum::new();
            let mut sum_sq = CompensatedSum::new();
            let mut done = 0u64;
            while done < strategy.mc_samples {
                let count = (strategy.mc_samples - done).min(PARTITION as u64) as usize;
                let mut sa = Matrix::zeros(d, count);
                let mut sb = Matrix::zeros(d, count);
                let mut na = Matrix::zeros(d, count);
                let mut nb = Matrix::zeros(d, count);
                for i in 0..count {
                    fill_pair(&mut rng, r, column_mut(&mut sa, i), column_mut(&mut sb, i));
                    fill_pair(&mut rng, r, column_mut(&mut na, i), column_mut(&mut nb, i));
                }
                let alpha = &ab_t * &sa;
                let beta = &forms.ab * &sb;
                let aa_sa = &forms.aa * &sa;
                let bb_sb = &forms.bb * &sb;
                let aa_na = &forms.aa * &na;
                let bb_nb = &forms.bb * &nb;
                for i in 0..count {
                    let qa = dot(column(&aa_sa, i), column(&sa, i));
                    let qb = dot(column(&bb_sb, i), column(&sb, i));
                    let pos_a = qa + qb - 2.0 * dot(column(&alpha, i), column(&sb, i));
                    let pos_b = qa + qb - 2.0 * dot(column(&beta, i), column(&sa, i));
                    let d1 = qa + dot(column(&bb_nb, i), column(&nb, i)) - 2.0 * dot(column(&alpha, i), column(&nb, i));
                    let d2 = dot(column(&aa_na, i), column(&na, i)) + qb - 2.0 * dot(column(&beta, i), column(&na, i));
                    // A redrawn latent equal to the positive one is a tie, which
                    // the batched products need not reproduce bitwise.
                    let win_a = column(&nb, i) != column(&sb, i) && pos_a < d1;
                    let win_b = column(&na, i) != column(&sa, i) && pos_b < d2;
                    let v = 0.5 * (f64::from(u8::from(win_a)) + f64::from(u8::from(win_b)));
                    sum.add(v);
                    sum_sq.add(v * v);
                }
                done += count as u64;
            }
            Ok(Estimate::from_sums(
                sum.value(),
                sum_sq.value(),
                strategy.mc_samples,
                true,
            ))
        }
    }
}

fn column(m: &Matrix, i: usize) -> &[f64] {
    let rows = m.nrows();
    &m.as_slice()[i * rows..(i + 1) * rows]
}

fn column_mut(m: &mut Matrix, i: usize) -> &mut [f64] {
    let rows = m.nrows();
    &mut m.as_mut_slice()[i * rows..(i + 1) * rows]
}

/// Draws a pair of latents `(z, ξ_A)` and `(z, ξ_B)` sharing `z`.
fn fill_pair(rng: &mut impl RngCore, signal_dim: usize, a: &mut [f64], b: &mut [f64]) {
    fill_signs(rng, &mut a[..signal_dim]);
    b[..signal_dim].copy_from_slice(&a[..signal_dim]);
    fill_signs(rng, &mut a[signal_dim..]);
    fill_signs(rng, &mut b[signal_dim..]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compute_kstate, init_weights, rng_for, ModelConfig, Stream};

    fn random_state(d: usize, r: usize, m: usize, seed: u64) -> KState {
        let cfg = ModelConfig::flat(d, r, m, seed);
        let enc = crate::model::build_encoders(&cfg, &mut rng_for(seed, Stream::Encoders)).unwrap();
        let w = init_weights(&cfg, &mut rng_for(seed, Stream::Weights));
        compute_kstate(&w, &enc).unwrap()
    }

    #[test]
    fn zero_temperature_closed_forms() {
        let k = random_state(4, 2, 3, 1);
        for negatives in [0.5, 1.0, 3.0] {
            let loss = contrastive_loss(&k, 0.0, negatives, &ExpectationStrategy::exact()).unwrap();
            assert!((loss.value - 2.0 * ln(1.0 + negatives)).abs() < 1e-12);
        }
    }

    #[test]
    fn no_negatives_gives_zero_loss() {
        let k = random_state(4, 2, 3, 2);
        let loss = contrastive_loss(&k, 0.7, 0.0, &ExpectationStrategy::exact()).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn exact_budget_enforced() {
        let k = random_state(12, 2, 3, 2);
        let err = contrastive_loss(&k, 1.0, 1.0, &ExpectationStrategy::exact().with_budget(1 << 10));
        assert!(matches!(err, Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn monte_carlo_is_bit_reproducible() {
        let k = random_state(6, 2, 5, 3);
        let s = ExpectationStrategy::monte_carlo(3000, 77);
        let a = population_moments(&k, 1.0, 1.0, LossKind::Contrastive, &s, 4, MomentRequest::Q).unwrap();
        let b = population_moments(&k, 1.0, 1.0, LossKind::Contrastive, &s, 4, MomentRequest::Q).unwrap();
        assert_eq!(a, b);
        let c = population_moments(&k, 1.0, 1.0, LossKind::Contrastive, &s, 5, MomentRequest::Q).unwrap();
        assert_ne!(a.loss.value, c.loss.value);
    }

    #[test]
    fn softmax_scores_equal_for_symmetric_state() {
        let k = random_state(5, 2, 4, 4);
        let sym = KState::from_full(k.full_a.clone(), k.full_a.clone(), 2).unwrap();
        let mut rng = rng_for(9, Stream::Samples);
        let quad = crate::model::sample_quad(&ModelConfig::flat(5, 2, 4, 0), &mut rng);
        let mut pair = PositivePair::from_quad(&quad);
        pair.xi_b = pair.xi_a.clone();
        let s = ExpectationStrategy::exact();
        let sa = softmax_score(&sym, 1.0, 1.0, &pair, Side::A, &s).unwrap();
        let sb = softmax_score(&sym, 1.0, 1.0, &pair, Side::B, &s).unwrap();
        assert!((sa.value - sb.value).abs() < 1e-14);
        assert!(sa.value > 0.0 && sa.value < 1.0);
    }

    #[test]
    fn non_contrastive_enumeration_matches_closed_form() {
        let k = random_state(5, 3, 4, 5);
        let e = non_contrastive_loss(&k, &ExpectationStrategy::exact()).unwrap();
        assert!((e.value - non_contrastive_loss_closed_form(&k)).abs() < 1e-12);
    }

    #[test]
    fn alignment_of_identity_model() {
        let id = Matrix::identity(3, 3);
        let k = KState::from_full(id.clone(), id, 3).unwrap();
        let g = alignment_score(&k, &ExpectationStrategy::exact()).unwrap();
        assert_eq!(g.value, 1.0 - 0.125);
    }
}
