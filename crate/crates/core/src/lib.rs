pub mod diffusion;
pub mod error;
pub mod lbm;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod tiling;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
