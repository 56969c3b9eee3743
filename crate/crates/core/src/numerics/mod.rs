//! Dense tensors, tape-based reverse-mode autodiff, Adam, and the array-map
//! checkpoint format every model component builds on.

mod adam;
pub mod arrays;
pub mod gradcheck;
mod params;
pub mod random;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use arrays::ArrayMap;
pub use params::{Bound, ParamId, ParamStore};
pub use random::{Rng, RngState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
