//! Normalized convolution upsampling (NCUP) of low-resolution flow fields.
//!
//! The pipeline scatters a low-resolution field onto a sparse
//! high-resolution grid, estimates per-pixel confidences from the
//! low-resolution field and its guidance image, and densifies the grid with
//! a small U-shaped cascade of normalized convolutions. Every stage is
//! differentiable through [`tensor::tape`], so the whole upsampler trains
//! end to end.

pub mod error;
pub mod flowio;
pub mod gradcheck;
pub mod nconv;
pub mod selftest;
pub mod sparsify;
pub mod tensor;
pub mod train;
pub mod upsampler;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
