//! Deterministic reverse-mode autodiff over dense `f64` tensors.
//!
//! The engine is deliberately small: a tape ([`Graph`]) of forward values,
//! the operations needed by convolutional classifiers and generators, and a
//! declarative layer description ([`nn::Layer`]) shared by every network.
//! Everything runs single-threaded in a fixed order, so two runs with the
//! same inputs produce bit-identical results.

pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{Bound, Layer, Mode, ParamKind, ParamStore, Trace};
pub use tensor::Tensor;
