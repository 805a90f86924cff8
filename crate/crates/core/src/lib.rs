//! Differentially private image synthesis with a compact diffusion model.
//!
//! The pipeline runs in two stages. Stage one releases a handful of noisy
//! "central" images (per-pixel means or histogram modes of Poisson samples)
//! and warms up the denoiser on augmented copies of them. Stage two fine-tunes
//! the warmed model on the sensitive images with DP-SGD. Every release is
//! charged to a Rényi-DP ledger, and the DP-SGD noise multiplier is calibrated
//! so the whole run meets a target `(ε, δ)`.
//!
//! Numeric code that does not need 64-bit precision is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below fix the precision used by the
//! pipeline and the CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod augment;
pub mod central_query;
pub mod dataset_io;
pub mod diffusion;
pub mod dpsgd;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngSeed;
pub use scalar::Scalar;

/// 64-bit image, the pixel container used throughout the pipeline.
pub type Image = tensor::ImageTensor<f64>;
/// 32-bit image.
pub type Image32 = tensor::ImageTensor<f32>;
/// 64-bit labeled dataset.
pub type Dataset = tensor::LabeledDataset<f64>;
/// 64-bit denoiser parameters.
pub type Params = diffusion::DenoiserParams<f64>;
/// 64-bit noise schedule.
pub type Schedule = diffusion::NoiseSchedule<f64>;
