//! Time-aware multi-scale spatio-temporal transformer for forecasting the
//! next label of irregularly sampled image sequences, built on a small
//! reverse-mode autodiff engine.

pub mod attention;
pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
