//! Reverberant-room source localization with two microphones.
//!
//! The crate covers the whole chain: image-source room simulation, relative
//! transfer function (RTF) phase features, an SRP-PHAT baseline, and a
//! semi-supervised variational autoencoder (M2 model) trained with a small
//! reverse-mode autodiff engine. The learning stack is generic over the
//! [`Scalar`] type; the aliases below fix it to `f64`. Desk-scale training
//! runs in `f32` for speed and casts the result back.

pub mod autodiff;
pub mod eval;
pub mod features;
pub mod room_sim;
pub mod scalar;
pub mod srp;
pub mod vae;

pub use autodiff::{Activation, AdError, AdamState, Gradients, Tape, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Adam64 = AdamState<f64>;
pub type ModelParams64 = vae::ModelParams<f64>;
