//! Glance/gaze video transformer: spatial-only downsampling attention,
//! masked dynamic convolution, and the tooling around them.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flops;
pub mod gaze;
pub mod glance;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod synthdata;
pub mod tempo;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{
    Conv3dSpec, Direction, Element, Gradients, Graph, ParamSet, Precision, Rng, Tensor, Var,
};
