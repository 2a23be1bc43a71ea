//! Deterministic federated learning simulator with not-true distillation.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod verify;

pub use error::{ConfigError, Error, IdxError, Result};
