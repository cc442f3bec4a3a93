//! Reweighted expectation maximization (REM) for deep latent-variable
//! models, with VAE and IWAE baselines, on a small reverse-mode autodiff
//! engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod importance;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
