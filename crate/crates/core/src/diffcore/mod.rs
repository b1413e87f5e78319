//! Numeric substrate: dense tensors, a reverse-mode tape, small MLPs, Adam,
//! reparameterized samplers, a finite-difference checker and the checkpoint
//! container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod sample;
pub mod special;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use mlp::{Activation, MlpNet};
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;
