//! Diffusion-embedded 3D U-Net for volumetric multi-class segmentation.
//!
//! The model learns to recover a clean one-hot label volume from a noised
//! one, conditioned on the image volume; at inference the DDIM reverse
//! process is run several times and the per-step predictions are fused
//! with step- and uncertainty-dependent weights.

pub mod codec;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod config;
pub mod data;
pub mod infer;
pub mod metrics;
pub mod scalar;
pub mod training;
pub mod sliding;
pub mod suf;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for production runs.
pub type Real = f32;
