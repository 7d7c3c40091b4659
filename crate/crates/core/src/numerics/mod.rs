//! Dense tensors, forward kernels and reverse-mode gradients.

pub mod graph;
pub mod ogt;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::{Conv3dSpec, Direction};
pub use params::{Bindings, Init, ParamSet, Scope};
pub use rng::Rng;
pub use tensor::{Element, Precision, Tensor};
