//! Meta-learning laboratory for the neural-process model family.
//!
//! The crate hosts a small reverse-mode autodiff engine, diagonal Gaussians,
//! the shared encoder/decoder architecture, four competing training
//! objectives (NP, CNP, ML-NP, SI-NP), a GP task simulator with an exact
//! oracle, and a deterministic trainer with multi-sample evaluation.

pub mod autodiff;
pub mod distributions;
pub mod error;
pub mod model;
pub mod objectives;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
