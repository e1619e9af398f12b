//! Dense tensors, a define-by-run tape, and the optimizer used to train every
//! model in the crate.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Target, Var};
pub use kernels::Segment;
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::SeededRng;
pub use tensor::Tensor;
