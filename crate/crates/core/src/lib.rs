//! Point cloud upsampling toolkit built around an invertible conditional
//! flow between surface patches and a latent Gaussian space. Sparse patches
//! are mapped into the latent space, densified there by learned convex
//! interpolation over local neighborhoods, and mapped back through the exact
//! inverse of the same flow. The crate also ships the supporting pieces:
//! a small reverse-mode autodiff tape, patch geometry utilities, transport
//! based losses and metrics, training, file formats, and a checkpoint
//! container.
//!
//! All numerics are generic over the scalar type; `f64` is the default used
//! by the command line tools, with `f32` available through the same API.

pub mod diffcore;
pub mod embedding;
pub mod flow;
pub mod geometry;
pub mod interpolation;
pub mod iodata;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod training;

pub use scalar::Real;

/// Default scalar used by the shipped binaries.
pub type Scalar = f64;

pub type Tensor32 = diffcore::Tensor<f32>;
pub type Tensor64 = diffcore::Tensor<f64>;
