//! Linear dual-encoder contrastive learning on a synthetic two-modality model.
//!
//! Each modality observes a shared binary latent `z` and a private binary
//! noise vector through a fixed orthogonal encoder. Two linear feature maps
//! are trained with a normalized InfoNCE-style population loss. The crate
//! provides the model, exact and sampled population expectations, closed-form
//! gradients expressed through the Q matrices, a gradient-descent simulator,
//! the infinite-width ODE, alignment and balance metrics, and numerical
//! checks of the structural identities the dynamics rely on.
//!
//! Everything here is `no_std` with `alloc`; IO and the command line live in
//! the companion `contrastive-dynamics-cli` crate.

#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` is used on purpose so that NaN takes the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;
pub mod expectation;
pub mod gradients;
pub mod infinite_width;
pub mod lemma_checks;
pub mod math;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod training;

pub use error::{Error, Result};
pub use expectation::{ExpectationMode, ExpectationStrategy, Estimate};
pub use gradients::{GradientPair, KRates, QSet};
pub use model::{EncoderSet, KState, ModelConfig, SampleQuad, Side, SigmaSpec, WeightState};
pub use expectation::LossKind;

/// Dense column-major matrix used throughout.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense column vector.
pub type Vector = nalgebra::DVector<f64>;
