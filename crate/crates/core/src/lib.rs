//! Correlation-function panoptic segmentation at desk scale.
//!
//! Layers, bottom up: a small f64 tensor type with reverse-mode autodiff,
//! Fourier-parameterized correlation functions, the semantic and instance
//! correlation modules built on them, a toy one-stage panoptic pipeline, and
//! a deterministic synthetic scene generator.

pub mod autodiff;
pub mod checkpoint;
pub mod corrfn;
pub mod error;
pub mod icm;
pub mod netpbm;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
