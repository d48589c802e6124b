//! Core library for adaptive feature fusion experiments: a small tensor
//! engine with reverse-mode differentiation, fusion blocks, reference
//! backbones, optimizers, synthetic dataset generators, and evaluation
//! metrics. Everything is deterministic given the seeds fed to
//! [`rng::RngStream`].

pub mod data;
pub mod fusion;
pub mod error;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
