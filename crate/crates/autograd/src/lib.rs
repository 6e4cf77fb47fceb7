//! A compact reverse-mode automatic differentiation engine for 1-D
//! convolutional and recurrent audio networks on the CPU.
//!
//! Values are dense `f64` tensors. A [`Graph`] records operations as they
//! execute; [`Graph::backward`] returns gradients for every node that
//! depends on a differentiable leaf. Parameters live in a [`ParamStore`]
//! and are copied into a graph with [`Graph::bind`].

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{log_sum_exp, Bound, CustomOp, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
