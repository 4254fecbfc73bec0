//! Low-light image enhancement trained with a semantically guided contrastive
//! objective, plus the evaluation metrics used to score it.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`). Training runs in
//! `f32`; gradient checks run in `f64`. The aliases below name the common
//! concrete instantiations.

pub mod archive;
pub mod data;
pub mod enhancer;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod segmenter;
pub mod selftest;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ImageF32 = imageio::Image<f32>;
pub type ImageF64 = imageio::Image<f64>;
pub type Tensor3F32 = tensor::Tensor3<f32>;
pub type Tensor3F64 = tensor::Tensor3<f64>;
pub type EnhancerF32 = enhancer::EnhancerParams<f32>;
pub type EnhancerF64 = enhancer::EnhancerParams<f64>;
pub type CurveStackF32 = enhancer::CurveStack<f32>;
pub type CurveStackF64 = enhancer::CurveStack<f64>;
pub type FeatureNetF32 = features::ConvFeatureNet<f32>;
pub type FeatureNetF64 = features::ConvFeatureNet<f64>;
pub type CheckpointF32 = trainer::Checkpoint<f32>;
