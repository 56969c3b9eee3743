pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod intent;
pub mod numerics;
pub mod objectives;
pub mod orchestrator;

pub use error::{Error, Result};
