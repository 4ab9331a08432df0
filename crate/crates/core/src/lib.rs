//! Multi-task regression with learned-context neural networks.
//!
//! A single residual ReLU network is shared by all tasks; each task is told
//! apart by a small trainable vector appended to the input. The crate also
//! carries the comparison architectures (context-sensitive one-hot input,
//! last-layer task heads, linear mixed-effect model), the SGD training stack,
//! a LIPO hyperparameter search, hold-out task adaptation, and hand-built
//! networks that demonstrate the adaptation mechanism exactly.

pub mod bench;
pub mod bundle;
pub mod constructions;
pub mod data;
pub mod error;
pub mod holdout;
pub mod hpo;
pub mod lme;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
