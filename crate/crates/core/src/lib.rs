//! Contrastive factor analysis at desk scale.
//!
//! The crate factorizes augmentation co-occurrence matrices with variational
//! contrastive objectives (Gaussian and Weibull posteriors) and verifies the
//! learned embeddings against exact spectral oracles on finite, enumerable
//! augmentation worlds. The numeric core (`tensor`, `autodiff`, `special`,
//! `distributions`, `augraph::jacobi`) is generic over the scalar type via
//! [`Scalar`]; the pipeline layers (encoder, losses, trainer, eval) run on the
//! `f64` aliases exported below, which is what the file formats pin.

pub mod augraph;
pub mod autodiff;
pub mod datagen;
pub mod distributions;
pub mod encoder;
mod error;
pub mod evalsuite;
pub mod losses;
pub mod rng;
pub mod scalar;
pub mod special;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense tensor over 64-bit floats, the carrier type of the whole pipeline.
pub type Tensor = tensor::Tensor<f64>;
/// Reverse-mode tape over 64-bit floats.
pub type Tape = autodiff::Tape<f64>;
/// Gaussian posterior/prior parameters over 64-bit floats.
pub type GaussianParams = distributions::GaussianParams<f64>;
/// Weibull posterior parameters over 64-bit floats.
pub type WeibullParams = distributions::WeibullParams<f64>;
/// Gamma prior parameters over 64-bit floats.
pub type GammaParams = distributions::GammaParams<f64>;
/// Finite augmentation world over 64-bit floats.
pub type AugmentationWorld = augraph::AugmentationWorld<f64>;
/// Co-occurrence matrix bundle over 64-bit floats.
pub type CoMatrix = augraph::CoMatrix<f64>;
