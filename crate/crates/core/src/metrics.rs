//! Observables of a K state.
//!
//! Everything except the alignment score is computed from the three `d×d`
//! Gram matrices of the full K matrices, so the cost is independent of `m`.

use alloc::vec::Vec;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expectation::{alignment_score, ExpectationStrategy};
use crate::math::sqrt;
use crate::model::{Grams, KState};
use crate::Matrix;

/// One row of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub gamma_align: f64,
    pub gamma_balance: f64,
    pub kappa0: f64,
    pub rho_minus: f64,
    pub rho_ns: f64,
    pub rho_hat_ns: f64,
    /// Leading eigenvalues of `Σ_f`, zero-padded to `min(m, r + 4)` entries.
    pub sigma_f_top: Vec<f64>,
}

/// Approximate-orthogonality diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    /// `max |‖[K_A]_j‖²/‖[K_B]_j‖² − 1|` over signal and noise columns.
    pub delta_ab: f64,
    /// `max_{p,q} |1 − ‖[K_{A,ξ}]_p‖/‖[K_{A,ξ}]_q‖|`.
    pub delta_xi_kappa0: f64,
    /// Largest cosine between distinct signal columns of `K_A`, `K_B`.
    pub delta_ab_perp: f64,
    /// Largest cosine between a signal and a noise column, or between a
    /// noise column of `K_A` and one of `K_B`.
    pub delta_xi_perp: f64,
}

impl DiagnosticsRecord {
    /// The diagnostics that govern the noiseless reduction: signal-column
    /// norm mismatch and signal-column orthogonality.
    pub fn signal_max(kstate: &KState) -> Result<f64> {
        let cols = Columns::new(kstate)?;
        let r = kstate.signal_dim;
        let mismatch = (0..r)
            .map(|j| (cols.norm_sq_a[j] / cols.norm_sq_b[j] - 1.0).abs())
            .fold(0.0, f64::max);
        Ok(mismatch.max(cols.signal_cross()))
    }

    pub fn max(&self) -> f64 {
        self.delta_ab
            .max(self.delta_xi_kappa0)
            .max(self.delta_ab_perp)
            .max(self.delta_xi_perp)
    }
}

/// Column norms and Grams shared by the Gram-based metrics.
struct Columns {
    grams: Grams,
    norm_sq_a: Vec<f64>,
    norm_sq_b: Vec<f64>,
    signal_dim: usize,
}

impl Columns {
    fn new(kstate: &KState) -> Result<Self> {
        let grams = kstate.grams();
        let norm_sq_a: Vec<f64> = grams.aa.diagonal().iter().copied().collect();
        let norm_sq_b: Vec<f64> = grams.bb.diagonal().iter().copied().collect();
        for (name, v) in [("K_A", &norm_sq_a), ("K_B", &norm_sq_b)] {
            if let Some(index) = v.iter().position(|x| !(*x > 0.0)) {
                return Err(Error::DegenerateColumn {
                    matrix: name,
                    index,
                });
            }
        }
        Ok(Self {
            grams,
            norm_sq_a,
            norm_sq_b,
            signal_dim: kstate.signal_dim,
        })
    }

    fn cos_aa(&self, i: usize, j: usize) -> f64 {
        self.grams.aa[(i, j)] / sqrt(self.norm_sq_a[i] * self.norm_sq_a[j])
    }

    fn cos_bb(&self, i: usize, j: usize) -> f64 {
        self.grams.bb[(i, j)] / sqrt(self.norm_sq_b[i] * self.norm_sq_b[j])
    }

    /// Cosine between column `i` of `K_A` and column `j` of `K_B`.
    fn cos_ab(&self, i: usize, j: usize) -> f64 {
        self.grams.ab[(i, j)] / sqrt(self.norm_sq_a[i] * self.norm_sq_b[j])
    }

    fn all_pairs(&self, i: usize, j: usize) -> f64 {
        self.cos_aa(i, j)
            .abs()
            .max(self.cos_bb(i, j).abs())
            .max(self.cos_ab(i, j).abs())
            .max(self.cos_ab(j, i).abs())
    }

    fn signal_cross(&self) -> f64 {
        let r = self.signal_dim;
        let mut out: f64 = 0.0;
        for p in 0..r {
            for q in 0..r {
                if p != q {
                    out = out.max(self.all_pairs(p, q));
                }
            }
        }
        out
    }
}

/// `Σ_f`'s nonzero spectrum via the `d×d` Gram `K_A^fullᵀ K_A^full / (N_A² d)`,
/// in descending order.
fn covariance_spectrum(kstate: &KState) -> Vec<f64> {
    let d = kstate.ambient_dim() as f64;
    let g = (kstate.full_a.transpose() * &kstate.full_a) / (kstate.norm_a * kstate.norm_a * d);
    let mut eig: Vec<f64> = SymmetricEigen::new(g)
        .eigenvalues
        .iter()
        .map(|x| x.max(0.0))
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

/// Stable rank `‖Σ_f‖_F² / ‖Σ_f‖₂²` of the population feature covariance.
pub fn balance_score(kstate: &KState) -> Result<f64> {
    let eig = covariance_spectrum(kstate);
    let top = eig[0];
    if !(top > 0.0) {
        return Err(Error::Collapse {
            side: crate::Side::A,
            value: top,
        });
    }
    Ok(eig.iter().map(|x| x * x).sum::<f64>() / (top * top))
}

/// Leading eigenvalues of `Σ_f`, zero-padded to `min(m, r + 4)`.
pub fn sigma_f_top(kstate: &KState) -> Vec<f64> {
    let len = kstate.width().min(kstate.signal_dim + 4);
    let mut eig = covariance_spectrum(kstate);
    eig.resize(len.max(eig.len()), 0.0);
    eig.truncate(len);
    eig
}

/// `(κ₀, spectral)`: the column-norm ratio of the signal block of `K_A` and
/// the ratio of its extreme singular values.
pub fn condition_numbers(kstate: &KState) -> Result<(f64, f64)> {
    let cols = Columns::new(kstate)?;
    let r = kstate.signal_dim;
    let norms = &cols.norm_sq_a[..r];
    let max = norms.iter().copied().fold(f64::MIN, f64::max);
    let min = norms.iter().copied().fold(f64::MAX, f64::min);
    let gram: Matrix = cols.grams.aa.view((0, 0), (r, r)).into_owned();
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let emax = eig.iter().copied().fold(f64::MIN, f64::max);
    let emin = eig.iter().copied().fold(f64::MAX, f64::min).max(0.0);
    let spectral = if emin > 0.0 {
        sqrt(emax / emin)
    } else {
        f64::INFINITY
    };
    Ok((sqrt(max / min), spectral))
}

/// `(ρ_−, ρ_{N/S}, ρ̂_{N/S})`.
pub fn ratios(kstate: &KState) -> Result<(f64, f64, f64)> {
    let cols = Columns::new(kstate)?;
    let r = kstate.signal_dim;
    let d = kstate.ambient_dim();
    let rho_minus = (0..r)
        .map(|p| 1.0 - cols.cos_ab(p, p))
        .fold(f64::MIN, f64::max);
    let min_signal = cols.norm_sq_a[..r].iter().copied().fold(f64::MAX, f64::min);
    let max_noise = cols.norm_sq_a[r..].iter().copied().fold(0.0, f64::max);
    let rho_ns = sqrt(max_noise / min_signal);
    let noise_sq: f64 = cols.norm_sq_a[r..].iter().sum();
    // ‖K_A + K_B‖_F² over the signal block.
    let sum_sq: f64 = (0..r)
        .map(|p| cols.norm_sq_a[p] + cols.norm_sq_b[p] + 2.0 * cols.grams.ab[(p, p)])
        .sum();
    debug_assert!(d >= r);
    let rho_hat_ns = if sum_sq > 0.0 {
        sqrt(noise_sq / sum_sq)
    } else {
        f64::INFINITY
    };
    Ok((rho_minus, rho_ns, rho_hat_ns))
}

pub fn diagnostics(kstate: &KState) -> Result<DiagnosticsRecord> {
    let cols = Columns::new(kstate)?;
    let r = kstate.signal_dim;
    let d = kstate.ambient_dim();
    let delta_ab = (0..d)
        .map(|j| (cols.norm_sq_a[j] / cols.norm_sq_b[j] - 1.0).abs())
        .fold(0.0, f64::max);
    let mut delta_xi_kappa0: f64 = 0.0;
    for p in r..d {
        for q in r..d {
            delta_xi_kappa0 =
                delta_xi_kappa0.max((1.0 - sqrt(cols.norm_sq_a[p] / cols.norm_sq_a[q])).abs());
        }
    }
    let mut delta_xi_perp: f64 = 0.0;
    for p in 0..r {
        for q in r..d {
            delta_xi_perp = delta_xi_perp.max(cols.all_pairs(p, q));
        }
    }
    for s in r..d {
        for q in r..d {
            delta_xi_perp = delta_xi_perp.max(cols.cos_ab(s, q).abs());
        }
    }
    Ok(DiagnosticsRecord {
        delta_ab,
        delta_xi_kappa0,
        delta_ab_perp: cols.signal_cross(),
        delta_xi_perp,
    })
}

/// All observables of one recorded step.
pub fn metrics(kstate: &KState, alignment: &ExpectationStrategy) -> Result<MetricsRecord> {
    let (kappa0, _) = condition_numbers(kstate)?;
    let (rho_minus, rho_ns, rho_hat_ns) = ratios(kstate)?;
    Ok(MetricsRecord {
        gamma_align: alignment_score(kstate, alignment)?.value,
        gamma_balance: balance_score(kstate)?,
        kappa0,
        rho_minus,
        rho_ns,
        rho_hat_ns,
        sigma_f_top: sigma_f_top(kstate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_state(values: &[f64], width: usize) -> KState {
        let r = values.len();
        let mut k = Matrix::zeros(width, r);
        for (i, v) in values.iter().enumerate() {
            k[(i, i)] = *v;
        }
        KState::from_full(k.clone(), k, r).unwrap()
    }

    #[test]
    fn identity_is_balanced_and_aligned() {
        let k = diag_state(&[1.0; 5], 5);
        assert!((balance_score(&k).unwrap() - 5.0).abs() < 1e-12);
        let (rm, rns, rhat) = ratios(&k).unwrap();
        assert!(rm.abs() < 1e-15 && rns == 0.0 && rhat == 0.0);
        let dg = diagnostics(&k).unwrap();
        assert_eq!(dg.max(), 0.0);
        assert_eq!(sigma_f_top(&k).len(), 5);
    }

    #[test]
    fn condition_numbers_of_diagonal() {
        let k = diag_state(&[2.0, 1.0], 2);
        let (k0, sp) = condition_numbers(&k).unwrap();
        assert!((k0 - 2.0).abs() < 1e-15);
        assert!((sp - 2.0).abs() < 1e-12);
        let k = diag_state(&[3.0, 1.0, 1.0], 6);
        assert!((condition_numbers(&k).unwrap().0 - 3.0).abs() < 1e-15);
    }

    #[test]
    fn unbalanced_diagonal_has_stable_rank_near_one() {
        let k = diag_state(&[1.0, 1e-3, 1e-3, 1e-3], 4);
        let b = balance_score(&k).unwrap();
        assert!(b > 1.0 && b < 1.1);
    }

    #[test]
    fn sigma_top_is_padded() {
        let k = diag_state(&[1.0, 1.0], 10);
        let top = sigma_f_top(&k);
        assert_eq!(top.len(), 6);
        assert_eq!(top[2..], [0.0; 4]);
    }
}
