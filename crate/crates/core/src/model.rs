//! Model configuration, encoders, weights and the K-space state.
//!
//! Inputs of modality A are `x_A = A z + A_ξ ξ_A` where `z ∈ {±1/√d}^r` is
//! shared with modality B and `ξ_A ∈ {±1/√d}^{d-r}` is private. The encoder
//! `[A | A_ξ]` is orthogonal with column scales `σ_p` on the signal block and
//! `σ_ξ` on the noise block. A feature map `W_A ∈ R^{d×m}` acts through
//! `K_A^full = W_A^T [A | A_ξ]`, which is the only quantity the loss sees.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sqrt;
use crate::{Matrix, Vector};

/// Normalizers at or below this value are treated as a collapsed feature map.
pub const COLLAPSE_THRESHOLD: f64 = 1e-12;

const MAX_ORTHONORMALIZATION_ATTEMPTS: u32 = 8;

/// One of the two modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::A => "A",
            Side::B => "B",
        })
    }
}

/// Named signal spectra accepted in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaPreset {
    /// All signal variances equal to one.
    Flat,
    /// The noise-free adversarial spectrum with constant 1 (requires `r = d`).
    Adversarial,
}

/// Signal variances `σ_1^2, ..., σ_r^2`, either listed or named.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Values(Vec<f64>),
    Named(SigmaPreset),
}

/// Spectrum `(max(1, c ln d), 1, ..., 1)` of length `d`.
///
/// With `c ln d >= 1` the leading variance is exactly `c ln d`; smaller `c`
/// saturates to the flat spectrum.
pub fn adversarial_sigma(ambient_dim: usize, c: f64) -> Vec<f64> {
    let mut v = vec![1.0; ambient_dim];
    if let Some(first) = v.first_mut() {
        *first = (c * crate::math::ln(ambient_dim as f64)).max(1.0);
    }
    v
}

fn default_assumption_c() -> f64 {
    1.0
}

/// Static description of one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Ambient input dimension.
    #[serde(rename = "d")]
    pub ambient_dim: usize,
    /// Dimension of the shared latent.
    #[serde(rename = "r")]
    pub signal_dim: usize,
    /// Feature (network) width.
    #[serde(rename = "m")]
    pub width: usize,
    #[serde(rename = "sigma_sq")]
    pub signal_variances: SigmaSpec,
    #[serde(rename = "sigma_xi_sq")]
    pub noise_variance: f64,
    /// Number of negatives in the loss.
    #[serde(rename = "K")]
    pub negatives: f64,
    pub seed: u64,
    /// Single-modal ablation: modality B reuses the encoder of A.
    #[serde(default)]
    pub shared_encoders: bool,
    /// Constant of the spectrum assumption `σ_max²/σ_min² · max(1, σ_ξ²/σ_min²) <= c ln d`.
    #[serde(default = "default_assumption_c")]
    pub assumption_c: f64,
}

/// Non-fatal findings of [`ModelConfig::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigWarning {
    SpectrumAssumption { ratio: f64, bound: f64 },
}

impl fmt::Display for ConfigWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigWarning::SpectrumAssumption { ratio, bound } => write!(
                f,
                "spectrum ratio {ratio:.4} exceeds the assumed bound {bound:.4}"
            ),
        }
    }
}

impl ModelConfig {
    /// A flat-spectrum configuration.
    pub fn flat(ambient_dim: usize, signal_dim: usize, width: usize, seed: u64) -> Self {
        Self {
            ambient_dim,
            signal_dim,
            width,
            signal_variances: SigmaSpec::Named(SigmaPreset::Flat),
            noise_variance: 1.0,
            negatives: 1.0,
            seed,
            shared_encoders: false,
            assumption_c: 1.0,
        }
    }

    pub fn noise_dim(&self) -> usize {
        self.ambient_dim - self.signal_dim
    }

    /// Resolves the signal spectrum to explicit variances.
    pub fn sigma_sq(&self) -> Result<Vec<f64>> {
        let v = match &self.signal_variances {
            SigmaSpec::Values(v) => v.clone(),
            SigmaSpec::Named(SigmaPreset::Flat) => vec![1.0; self.signal_dim],
            SigmaSpec::Named(SigmaPreset::Adversarial) => {
                if self.signal_dim != self.ambient_dim {
                    return Err(Error::InvalidConfig(format!(
                        "the adversarial spectrum needs r = d, got r = {} and d = {}",
                        self.signal_dim, self.ambient_dim
                    )));
                }
                adversarial_sigma(self.ambient_dim, 1.0)
            }
        };
        if v.len() != self.signal_dim {
            return Err(Error::InvalidConfig(format!(
                "sigma_sq has {} entries but r = {}",
                v.len(),
                self.signal_dim
            )));
        }
        Ok(v)
    }

    /// Checks shapes and ranges; returns assumption violations as warnings.
    pub fn validate(&self) -> Result<Vec<ConfigWarning>> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.ambient_dim == 0 || self.signal_dim == 0 || self.width == 0 {
            return bad(format!(
                "dimensions must be positive: d = {}, r = {}, m = {}",
                self.ambient_dim, self.signal_dim, self.width
            ));
        }
        if self.signal_dim > self.ambient_dim {
            return bad(format!(
                "r = {} exceeds d = {}",
                self.signal_dim, self.ambient_dim
            ));
        }
        if self.ambient_dim > 120 {
            return bad(format!("d = {} is too large", self.ambient_dim));
        }
        let sigma = self.sigma_sq()?;
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return bad(format!("signal variances must be positive, found {s}"));
        }
        if self.noise_dim() > 0 && !(self.noise_variance.is_finite() && self.noise_variance > 0.0) {
            return bad(format!(
                "noise variance must be positive, found {}",
                self.noise_variance
            ));
        }
        if !(self.negatives.is_finite() && self.negatives >= 0.0) {
            return bad(format!(
                "number of negatives must be non-negative, found {}",
                self.negatives
            ));
        }
        let mut warnings = Vec::new();
        let (ratio, bound) = self.spectrum_assumption(&sigma);
        if ratio > bound {
            warnings.push(ConfigWarning::SpectrumAssumption { ratio, bound });
        }
        Ok(warnings)
    }

    fn spectrum_assumption(&self, sigma: &[f64]) -> (f64, f64) {
        let max = sigma.iter().copied().fold(f64::MIN, f64::max);
        let min = sigma.iter().copied().fold(f64::MAX, f64::min);
        let noise = if self.noise_dim() > 0 {
            self.noise_variance / min
        } else {
            0.0
        };
        let ratio = max / min * noise.max(1.0);
        let bound = self.assumption_c * crate::math::ln(self.ambient_dim as f64);
        (ratio, bound)
    }
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Encoders = 1,
    Weights = 2,
    Samples = 3,
    Alignment = 4,
    Batches = 5,
}

/// A ChaCha8 generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    substream(seed, stream as u64)
}

/// A ChaCha8 generator for an arbitrary `(seed, stream)` pair.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Orthogonal encoders `[A | A_ξ]` and `[B | B_ξ]` stored as full `d×d` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSet {
    pub full_a: Matrix,
    pub full_b: Matrix,
    pub signal_dim: usize,
    pub sigma_sq: Vec<f64>,
    pub noise_variance: f64,
}

impl EncoderSet {
    pub fn ambient_dim(&self) -> usize {
        self.full_a.nrows()
    }

    pub fn full(&self, side: Side) -> &Matrix {
        match side {
            Side::A => &self.full_a,
            Side::B => &self.full_b,
        }
    }

    /// Signal block (`d×r`).
    pub fn signal(&self, side: Side) -> Matrix {
        let f = self.full(side);
        f.columns(0, self.signal_dim).into_owned()
    }

    /// Noise block (`d×(d-r)`).
    pub fn noise(&self, side: Side) -> Matrix {
        let f = self.full(side);
        f.columns(self.signal_dim, f.ncols() - self.signal_dim)
            .into_owned()
    }

    /// Diagonal of `[A | A_ξ]^T [A | A_ξ]`.
    pub fn column_variances(&self) -> Vec<f64> {
        let mut v = self.sigma_sq.clone();
        v.resize(self.ambient_dim(), self.noise_variance);
        v
    }
}

fn random_orthogonal(dim: usize, rng: &mut impl RngCore) -> Result<Matrix> {
    for _ in 0..MAX_ORTHONORMALIZATION_ATTEMPTS {
        let g = Matrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
        let qr = g.qr();
        let diag = qr.r().diagonal();
        let max = diag.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        let min = diag.iter().fold(f64::MAX, |a, x| a.min(x.abs()));
        if max > 0.0 && min > 1e-10 * max {
            return Ok(qr.q());
        }
    }
    Err(Error::DegenerateEncoders {
        attempts: MAX_ORTHONORMALIZATION_ATTEMPTS,
    })
}

/// Draws orthogonal encoders with column scales `σ_p` and `σ_ξ`.
pub fn build_encoders(config: &ModelConfig, rng: &mut impl RngCore) -> Result<EncoderSet> {
    config.validate()?;
    let sigma_sq = config.sigma_sq()?;
    let d = config.ambient_dim;
    let scales: Vec<f64> = sigma_sq
        .iter()
        .map(|s| sqrt(*s))
        .chain(core::iter::repeat(sqrt(config.noise_variance)).take(config.noise_dim()))
        .collect();
    let scaled = |q: Matrix| {
        let mut q = q;
        for (j, s) in scales.iter().enumerate() {
            q.column_mut(j).scale_mut(*s);
        }
        q
    };
    let full_a = scaled(random_orthogonal(d, rng)?);
    let full_b = if config.shared_encoders {
        full_a.clone()
    } else {
        scaled(random_orthogonal(d, rng)?)
    };
    Ok(EncoderSet {
        full_a,
        full_b,
        signal_dim: config.signal_dim,
        sigma_sq,
        noise_variance: config.noise_variance,
    })
}

/// The two trainable linear maps `W_A, W_B ∈ R^{d×m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub w_a: Matrix,
    pub w_b: Matrix,
}

impl WeightState {
    pub fn get(&self, side: Side) -> &Matrix {
        match side {
            Side::A => &self.w_a,
            Side::B => &self.w_b,
        }
    }

    pub fn get_mut(&mut self, side: Side) -> &mut Matrix {
        match side {
            Side::A => &mut self.w_a,
            Side::B => &mut self.w_b,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_a.iter().chain(self.w_b.iter()).all(|x| x.is_finite())
    }
}

/// I.i.d. `N(0, 1/m)` entries.
pub fn init_weights(config: &ModelConfig, rng: &mut impl RngCore) -> WeightState {
    let std = 1.0 / sqrt(config.width as f64);
    let (d, m) = (config.ambient_dim, config.width);
    let mut draw = || {
        Matrix::from_fn(d, m, |_, _| {
            let g: f64 = StandardNormal.sample(rng);
            g * std
        })
    };
    let w_a = draw();
    let w_b = draw();
    WeightState { w_a, w_b }
}

/// A vector of `±1` entries; the physical value is `sign / √d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignVector(pub Vec<i8>);

/// Writes `±1.0` entries drawn from the same bit stream as [`SignVector::random`].
pub(crate) fn fill_signs(rng: &mut impl RngCore, out: &mut [f64]) {
    let mut bits = 0u64;
    for (i, slot) in out.iter_mut().enumerate() {
        if i % 64 == 0 {
            bits = rng.next_u64();
        }
        *slot = if bits & 1 == 1 { 1.0 } else { -1.0 };
        bits >>= 1;
    }
}

impl SignVector {
    pub fn random(len: usize, rng: &mut impl RngCore) -> Self {
        let mut out = Vec::with_capacity(len);
        let mut bits = 0u64;
        for i in 0..len {
            if i % 64 == 0 {
                bits = rng.next_u64();
            }
            out.push(if bits & 1 == 1 { 1 } else { -1 });
            bits >>= 1;
        }
        Self(out)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, scale: f64) -> Vec<f64> {
        self.0.iter().map(|&s| f64::from(s) * scale).collect()
    }
}

/// One positive pair plus one negative pair of latent draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleQuad {
    pub z_pos: SignVector,
    pub z_neg: SignVector,
    pub xi_a_pos: SignVector,
    pub xi_b_pos: SignVector,
    pub xi_a_neg: SignVector,
    pub xi_b_neg: SignVector,
    /// Entry magnitude `1/√d`.
    pub scale: f64,
}

impl SampleQuad {
    /// Physical latent `(z, ξ)` of one side, concatenated.
    pub fn latent(&self, side: Side, positive: bool) -> Vec<f64> {
        let (z, xi) = match (side, positive) {
            (Side::A, true) => (&self.z_pos, &self.xi_a_pos),
            (Side::B, true) => (&self.z_pos, &self.xi_b_pos),
            (Side::A, false) => (&self.z_neg, &self.xi_a_neg),
            (Side::B, false) => (&self.z_neg, &self.xi_b_neg),
        };
        let mut v = z.scaled(self.scale);
        v.extend(xi.scaled(self.scale));
        v
    }
}

/// Draws `(z+, z-, ξ_A+, ξ_B+, ξ_A-, ξ_B-)` with uniform independent signs.
pub fn sample_quad(config: &ModelConfig, rng: &mut impl RngCore) -> SampleQuad {
    let (r, n) = (config.signal_dim, config.noise_dim());
    SampleQuad {
        z_pos: SignVector::random(r, rng),
        z_neg: SignVector::random(r, rng),
        xi_a_pos: SignVector::random(n, rng),
        xi_b_pos: SignVector::random(n, rng),
        xi_a_neg: SignVector::random(n, rng),
        xi_b_neg: SignVector::random(n, rng),
        scale: 1.0 / sqrt(config.ambient_dim as f64),
    }
}

/// Input `x = A z + A_ξ ξ` of one modality; `z` and `ξ` are physical values.
pub fn encode(encoders: &EncoderSet, side: Side, z: &[f64], xi: &[f64]) -> Result<Vector> {
    let d = encoders.ambient_dim();
    if z.len() != encoders.signal_dim || z.len() + xi.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "latent lengths ({}, {}) do not match r = {} and d = {}",
            z.len(),
            xi.len(),
            encoders.signal_dim,
            d
        )));
    }
    let u = Vector::from_iterator(d, z.iter().chain(xi.iter()).copied());
    Ok(encoders.full(side) * u)
}

/// `K_A^full = W_A^T [A | A_ξ]` and its B counterpart, with normalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct KState {
    /// `m×d`; the first `r` columns are `K_A`, the rest `K_{A,ξ}`.
    pub full_a: Matrix,
    pub full_b: Matrix,
    pub signal_dim: usize,
    pub norm_a: f64,
    pub norm_b: f64,
}

/// Population normalizer `N = ‖K^full‖_F / √d`.
pub fn normalizer(full: &Matrix) -> f64 {
    sqrt(full.norm_squared() / full.ncols() as f64)
}

impl KState {
    /// Builds a state from full `m×d` blocks, computing the normalizers.
    pub fn from_full(full_a: Matrix, full_b: Matrix, signal_dim: usize) -> Result<Self> {
        if full_a.shape() != full_b.shape() || signal_dim == 0 || signal_dim > full_a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "K blocks {:?} and {:?} with r = {}",
                full_a.shape(),
                full_b.shape(),
                signal_dim
            )));
        }
        let norm_a = normalizer(&full_a);
        let norm_b = normalizer(&full_b);
        for (side, value) in [(Side::A, norm_a), (Side::B, norm_b)] {
            if !(value > COLLAPSE_THRESHOLD) {
                return Err(Error::Collapse { side, value });
            }
        }
        Ok(Self {
            full_a,
            full_b,
            signal_dim,
            norm_a,
            norm_b,
        })
    }

    /// Builds a state from the four blocks `K_A, K_{A,ξ}, K_B, K_{B,ξ}`.
    pub fn from_blocks(k_a: &Matrix, k_a_xi: &Matrix, k_b: &Matrix, k_b_xi: &Matrix) -> Result<Self> {
        let join = |s: &Matrix, n: &Matrix| -> Result<Matrix> {
            if s.nrows() != n.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "signal block has {} rows, noise block {}",
                    s.nrows(),
                    n.nrows()
                )));
            }
            let mut f = Matrix::zeros(s.nrows(), s.ncols() + n.ncols());
            f.columns_mut(0, s.ncols()).copy_from(s);
            f.columns_mut(s.ncols(), n.ncols()).copy_from(n);
            Ok(f)
        };
        Self::from_full(join(k_a, k_a_xi)?, join(k_b, k_b_xi)?, k_a.ncols())
    }

    pub fn ambient_dim(&self) -> usize {
        self.full_a.ncols()
    }

    pub fn width(&self) -> usize {
        self.full_a.nrows()
    }

    pub fn noise_dim(&self) -> usize {
        self.ambient_dim() - self.signal_dim
    }

    pub fn full(&self, side: Side) -> &Matrix {
        match side {
            Side::A => &self.full_a,
            Side::B => &self.full_b,
        }
    }

    pub fn norm(&self, side: Side) -> f64 {
        match side {
            Side::A => self.norm_a,
            Side::B => self.norm_b,
        }
    }

    /// `K_A` or `K_B` (`m×r`).
    pub fn signal(&self, side: Side) -> Matrix {
        self.full(side).columns(0, self.signal_dim).into_owned()
    }

    /// `K_{A,ξ}` or `K_{B,ξ}` (`m×(d-r)`).
    pub fn noise(&self, side: Side) -> Matrix {
        self.full(side)
            .columns(self.signal_dim, self.noise_dim())
            .into_owned()
    }

    /// The three `d×d` Gram matrices of the full K maps.
    pub fn grams(&self) -> Grams {
        Grams {
            aa: self.full_a.transpose() * &self.full_a,
            bb: self.full_b.transpose() * &self.full_b,
            ab: self.full_a.transpose() * &self.full_b,
        }
    }
}

/// `K_A^T K_A`, `K_B^T K_B` and `K_A^T K_B` over the full latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Grams {
    pub aa: Matrix,
    pub bb: Matrix,
    pub ab: Matrix,
}

/// Computes the K-space state of `weights` under `encoders`.
pub fn compute_kstate(weights: &WeightState, encoders: &EncoderSet) -> Result<KState> {
    let d = encoders.ambient_dim();
    for w in [&weights.w_a, &weights.w_b] {
        if w.nrows() != d || w.ncols() != weights.w_a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "weights of shape {:?} for d = {}",
                w.shape(),
                d
            )));
        }
    }
    KState::from_full(
        weights.w_a.transpose() * &encoders.full_a,
        weights.w_b.transpose() * &encoders.full_b,
        encoders.signal_dim,
    )
}

/// Normalized feature `f = (K z + K_ξ ξ) / N`; `z` and `ξ` are physical values.
pub fn feature_map(kstate: &KState, side: Side, z: &[f64], xi: &[f64]) -> Result<Vector> {
    let d = kstate.ambient_dim();
    if z.len() != kstate.signal_dim || z.len() + xi.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "latent lengths ({}, {}) do not match r = {} and d = {}",
            z.len(),
            xi.len(),
            kstate.signal_dim,
            d
        )));
    }
    let u = Vector::from_iterator(d, z.iter().chain(xi.iter()).copied());
    Ok(kstate.full(side) * u / kstate.norm(side))
}
