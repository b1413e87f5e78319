// `!(x > 0.0)` style guards are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corpus;
pub mod diffcore;
pub mod elbo;
pub mod error;
pub mod evalkit;
pub mod generative;
pub mod inference;
pub mod predictor;
pub mod synth;
pub mod pretrain;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
