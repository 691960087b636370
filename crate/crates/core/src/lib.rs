//! Adaptive lattice quantization for federated learning: lattice codecs,
//! online learning of generator matrices, a federated simulator and
//! numerical checks of the accompanying error and convergence bounds.

pub mod error;
pub mod fl;
pub mod lattice;
pub mod learning;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
