//! Differentiable rational transfer functions (G-blocks) and the tooling to
//! train block-oriented dynamical models with them.
//!
//! The filter recursions and their reverse-mode gradients live in [`tf`] and
//! [`grad`]; [`tape`] composes them with static nonlinearities; [`pem`] and
//! [`quantized`] provide the prediction-error and quantized-likelihood
//! criteria that [`optim`] minimizes.

pub mod blocks;
pub mod datagen;
pub mod error;
pub mod grad;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod normal;
pub mod optim;
pub mod pipeline;
pub mod pem;
pub mod quantized;
pub mod signal;
pub mod tape;
pub mod tf;

#[cfg(test)]
mod testutil;

pub use blocks::{Block, DynoNetModel, MimoGBlock, MlpParams};
pub use error::{Error, Result};
pub use pem::PemModel;
pub use quantized::{NoiseScale, Quantizer};
pub use signal::Signal;
pub use tape::{ParameterStore, Tape};
pub use tf::TransferFunctionParams;
