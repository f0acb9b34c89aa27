//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

mod eager;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod params;
pub mod rng;
mod tensor;

pub use eager::Eager;
pub use graph::{Graph, Var};
pub use kernels::LossParts;
pub use ops::Ops;
pub use params::{Grads, ParamId, Params};
pub use rng::SeedStreams;
pub use tensor::Tensor;
