//! Sparse signal recovery with a spike-and-slab prior whose spike probabilities
//! follow a two-level (spatial and temporal) Gaussian-process prior, inferred
//! by expectation propagation in batch or streaming mode.

pub mod error;
pub mod expfam;
pub mod kernels;
pub mod model;
pub mod ep;
pub mod metrics;
pub mod stream;
pub mod baseline;
pub mod io;
pub mod cli;

pub use error::{Error, Result};
