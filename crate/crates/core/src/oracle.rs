//! Brute-force reference evaluators.
//!
//! Everything here works with explicit embeddings in `R^m`: every latent sign
//! pattern is mapped to its feature vector, the normalizer is the enumerated
//! root-mean-square feature norm, and every expectation (including the inner
//! one over negatives) is a plain nested sum. Nothing is factorized, so these
//! functions serve as independent checks of the closed-form paths. They are
//! exponential in `d` and meant for `d ≲ 10`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{exp, ln, sqrt};
use crate::model::{encode, EncoderSet, KState, Side, WeightState};
use crate::{Matrix, Vector};

const MAX_DIM: usize = 12;

/// Features of every latent pattern `u ∈ {±1/√d}^d` for both sides.
///
/// Pattern `i` has coordinate `j` positive iff bit `j` of `i` is set; the
/// first `r` coordinates are `z`, the rest the private noise.
#[derive(Debug, Clone)]
pub struct Features {
    pub ambient_dim: usize,
    pub signal_dim: usize,
    pub a: Vec<Vector>,
    pub b: Vec<Vector>,
}

fn latent(index: usize, dim: usize) -> Vec<f64> {
    let s = 1.0 / sqrt(dim as f64);
    (0..dim)
        .map(|j| if index >> j & 1 == 1 { s } else { -s })
        .collect()
}

fn check_dim(dim: usize) -> Result<()> {
    if dim > MAX_DIM {
        return Err(Error::BudgetExceeded {
            required: 1u128 << (2 * dim),
            budget: 1u128 << (2 * MAX_DIM),
        });
    }
    Ok(())
}

fn normalized(raw: Vec<Vector>) -> Vec<Vector> {
    let mean_sq = raw.iter().map(|v| v.norm_squared()).sum::<f64>() / raw.len() as f64;
    let n = sqrt(mean_sq);
    raw.into_iter().map(|v| v / n).collect()
}

impl Features {
    /// Features `W^T x / N` computed from explicit inputs `x = A z + A_ξ ξ`.
    pub fn from_weights(weights: &WeightState, encoders: &EncoderSet) -> Result<Self> {
        let d = encoders.ambient_dim();
        check_dim(d)?;
        let r = encoders.signal_dim;
        let side_features = |side: Side| -> Result<Vec<Vector>> {
            let raw = (0..1usize << d)
                .map(|i| {
                    let u = latent(i, d);
                    let x = encode(encoders, side, &u[..r], &u[r..])?;
                    Ok(weights.get(side).tr_mul(&x))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(normalized(raw))
        };
        Ok(Self {
            ambient_dim: d,
            signal_dim: r,
            a: side_features(Side::A)?,
            b: side_features(Side::B)?,
        })
    }

    /// Features `K^full u / N` with the normalizer re-derived by enumeration.
    pub fn from_kstate(kstate: &KState) -> Result<Self> {
        let d = kstate.ambient_dim();
        check_dim(d)?;
        let side_features = |k: &Matrix| {
            normalized(
                (0..1usize << d)
                    .map(|i| k * Vector::from_vec(latent(i, d)))
                    .collect(),
            )
        };
        Ok(Self {
            ambient_dim: d,
            signal_dim: kstate.signal_dim,
            a: side_features(&kstate.full_a),
            b: side_features(&kstate.full_b),
        })
    }

    /// Arbitrary feature maps given as functions of the latent pattern.
    pub fn from_fn(
        ambient_dim: usize,
        signal_dim: usize,
        mut a: impl FnMut(&[f64]) -> Vector,
        mut b: impl FnMut(&[f64]) -> Vector,
    ) -> Result<Self> {
        check_dim(ambient_dim)?;
        let lat: Vec<Vec<f64>> = (0..1usize << ambient_dim)
            .map(|i| latent(i, ambient_dim))
            .collect();
        Ok(Self {
            ambient_dim,
            signal_dim,
            a: lat.iter().map(|u| a(u)).collect(),
            b: lat.iter().map(|u| b(u)).collect(),
        })
    }

    fn noise_dim(&self) -> usize {
        self.ambient_dim - self.signal_dim
    }

    /// All positive pairs as (A-pattern, B-pattern) indices.
    fn positives(&self) -> Vec<(usize, usize)> {
        let (r, n) = (self.signal_dim, self.noise_dim());
        let mut out = Vec::with_capacity(1 << (r + 2 * n));
        for z in 0..1usize << r {
            for xa in 0..1usize << n {
                for xb in 0..1usize << n {
                    out.push((z | xa << r, z | xb << r));
                }
            }
        }
        out
    }

    fn patterns(&self) -> usize {
        1 << self.ambient_dim
    }
}

/// Scores `S_A` and `S_B` of one positive pair, by explicit sums.
fn scores(f: &Features, ia: usize, ib: usize, tau_sq: f64, negatives: f64) -> (f64, f64) {
    let fa = &f.a[ia];
    let fb = &f.b[ib];
    let e_pos = exp(tau_sq * fa.dot(fb));
    let n = f.patterns() as f64;
    let z_a = f.b.iter().map(|g| exp(tau_sq * fa.dot(g))).sum::<f64>() / n;
    let z_b = f.a.iter().map(|g| exp(tau_sq * g.dot(fb))).sum::<f64>() / n;
    (
        e_pos / (e_pos + negatives * z_a),
        e_pos / (e_pos + negatives * z_b),
    )
}

/// `−E ln S_A − E ln S_B`.
pub fn contrastive_loss(f: &Features, tau_sq: f64, negatives: f64) -> f64 {
    let pos = f.positives();
    let total: f64 = pos
        .iter()
        .map(|&(ia, ib)| {
            let (sa, sb) = scores(f, ia, ib, tau_sq, negatives);
            -ln(sa) - ln(sb)
        })
        .sum();
    total / pos.len() as f64
}

/// `−E⟨f_A⁺, f_B⁺⟩`.
pub fn non_contrastive_loss(f: &Features) -> f64 {
    let pos = f.positives();
    -pos.iter().map(|&(ia, ib)| f.a[ia].dot(&f.b[ib])).sum::<f64>() / pos.len() as f64
}

/// `S_A` (side A) or `S_B` (side B) at the positive pair with the given
/// latent patterns.
pub fn softmax_score(
    f: &Features,
    pattern_a: usize,
    pattern_b: usize,
    tau_sq: f64,
    negatives: f64,
    side: Side,
) -> f64 {
    let (sa, sb) = scores(f, pattern_a, pattern_b, tau_sq, negatives);
    match side {
        Side::A => sa,
        Side::B => sb,
    }
}

/// The combined Q matrix (rows B-latent, columns A-latent) and `Q_0`, from
/// their defining expectations with explicit negatives.
pub fn q_coefficients(f: &Features, tau_sq: f64, negatives: f64) -> (Matrix, f64) {
    let d = f.ambient_dim;
    let lat: Vec<Vector> = (0..f.patterns()).map(|i| Vector::from_vec(latent(i, d))).collect();
    let pos = f.positives();
    let n_neg = f.patterns() as f64;
    let mut m = Matrix::zeros(d, d);
    let mut q0 = 0.0;
    for &(ia, ib) in &pos {
        let (fa, fb) = (&f.a[ia], &f.b[ib]);
        let (ua, ub) = (&lat[ia], &lat[ib]);
        let s_pos = fa.dot(fb);
        let e_pos = exp(tau_sq * s_pos);
        let (sa, sb) = scores(f, ia, ib, tau_sq, negatives);
        let c = 2.0 - sa - sb;
        m += ub * ua.transpose() * (c * d as f64);
        q0 -= c * s_pos;
        for k in 0..f.patterns() {
            // B-side negative inside S_A.
            let s_ab = fa.dot(&f.b[k]);
            let wa = negatives * sa * exp(tau_sq * s_ab) / e_pos / n_neg;
            m -= &lat[k] * ua.transpose() * (wa * d as f64);
            q0 += wa * s_ab;
            // A-side negative inside S_B.
            let s_ba = f.a[k].dot(fb);
            let wb = negatives * sb * exp(tau_sq * s_ba) / e_pos / n_neg;
            m -= ub * lat[k].transpose() * (wb * d as f64);
            q0 += wb * s_ba;
        }
    }
    let count = pos.len() as f64;
    (m / count, q0 / count)
}

/// Alignment score with strict inequalities, by explicit feature distances.
pub fn alignment_score(f: &Features) -> f64 {
    let pos = f.positives();
    let mut wins = 0u64;
    for &(ia, ib) in &pos {
        let d_pos = (&f.a[ia] - &f.b[ib]).norm();
        for k in 0..f.patterns() {
            wins += u64::from(d_pos < (&f.a[ia] - &f.b[k]).norm());
            wins += u64::from(d_pos < (&f.a[k] - &f.b[ib]).norm());
        }
    }
    wins as f64 / (2.0 * pos.len() as f64 * f.patterns() as f64)
}

/// `E_{s⁻} exp(τ² Σ_p κ̂_p² s_p s⁻_p / c)` over all `s⁻ ∈ {±1}^r`.
pub fn partition_sum(hat_kappa_sq: &[f64], positive: &[f64], tau_sq: f64, scale: f64) -> f64 {
    let r = hat_kappa_sq.len();
    let mut total = 0.0;
    for i in 0..1usize << r {
        let arg: f64 = (0..r)
            .map(|p| {
                let s = if i >> p & 1 == 1 { 1.0 } else { -1.0 };
                hat_kappa_sq[p] * positive[p] * s
            })
            .sum();
        total += exp(tau_sq * arg / scale);
    }
    total / (1usize << r) as f64
}
