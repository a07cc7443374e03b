//! Scalar kernels and compensated accumulators.
//!
//! All transcendental functions go through `libm` so that results are
//! bit-identical regardless of target features or build flags.

use crate::Matrix;

pub const LN_2: f64 = core::f64::consts::LN_2;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn cosh(x: f64) -> f64 {
    libm::cosh(x)
}

/// `ln cosh x` without overflow for large `|x|`.
#[inline]
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + ln_1p(exp(-2.0 * a)) - LN_2
}

/// `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + ln_1p(exp(-x))
    } else {
        ln_1p(exp(x))
    }
}

/// Logistic function `1 / (1 + e^{-x})`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Returns `(ln cosh x - |x| + ln 2, tanh x)` sharing one exponential.
///
/// The first component is `ln(1 + e^{-2|x|})`; callers add `|x| - ln 2`
/// themselves so that a product over many coordinates needs a single log.
#[inline]
pub fn cosh_tanh_parts(x: f64) -> (f64, f64) {
    let a = x.abs();
    let e = exp(-2.0 * a);
    let t = (1.0 - e) / (1.0 + e);
    (1.0 + e, if x < 0.0 { -t } else { t })
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl core::iter::FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of a slice.
pub fn compensated_sum(values: &[f64]) -> f64 {
    values.iter().copied().collect::<CompensatedSum>().value()
}

/// Entry-wise Neumaier accumulator for matrices of a fixed shape.
#[derive(Debug, Clone)]
pub struct CompensatedMatrix {
    sum: Matrix,
    compensation: Matrix,
}

impl CompensatedMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            sum: Matrix::zeros(rows, cols),
            compensation: Matrix::zeros(rows, cols),
        }
    }

    pub fn add(&mut self, x: &Matrix) {
        debug_assert_eq!(self.sum.shape(), x.shape());
        for ((s, c), &v) in self
            .sum
            .iter_mut()
            .zip(self.compensation.iter_mut())
            .zip(x.iter())
        {
            let t = *s + v;
            if s.abs() >= v.abs() {
                *c += (*s - t) + v;
            } else {
                *c += (v - t) + *s;
            }
            *s = t;
        }
    }

    pub fn value(&self) -> Matrix {
        &self.sum + &self.compensation
    }
}

/// Frobenius inner product `<x, y>`.
pub fn frobenius_dot(x: &Matrix, y: &Matrix) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| a * b).sum()
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
