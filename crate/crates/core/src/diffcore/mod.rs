//! Reverse-mode automatic differentiation on a per-evaluation tape.
//!
//! Every network evaluation (training or inference) records a fresh tape of
//! primitive ops over 2-D tensors. Training calls [`Tape::backward`] once per
//! loss; inference simply reads values off the tape. Parameters live in a
//! [`ParamStore`] with stable insertion order, which is what makes gradient
//! accumulation and optimizer updates deterministic.

mod adam;
mod gradcheck;
mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use gradcheck::check_gradient;
pub use nn::{InitMode, LayerNorm, Linear, Mlp, LEAKY_SLOPE};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{DiffError, Tensor};
