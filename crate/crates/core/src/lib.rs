//! Subnetwork linearized Laplace inference for small ReLU MLPs.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod laplace;
pub mod linalg;
pub mod net;
pub mod predict;
pub mod rng;
pub mod select;
pub mod train;

pub use error::{Error, Result};
