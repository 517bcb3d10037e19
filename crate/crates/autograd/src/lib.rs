//! Reverse-mode automatic differentiation for small sequence models.
//!
//! Everything is computed in `f64` on dense row-major matrices. Sequences are
//! `T × C` tensors (time along rows), vectors are `1 × n` rows.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, softplus, BinEdge, ConvSpec, Graph, Var};
pub use params::{Gradients, Init, ParamError, ParamId, ParamStore};
pub use tensor::Tensor;
