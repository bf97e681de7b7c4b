pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod gp;
pub mod gpdbn;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};

/// Seedable generator used for every stochastic operation.
pub type ModelRng = rand_pcg::Pcg64;
