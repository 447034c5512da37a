pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
