//! Reverse-mode automatic differentiation over dense fp64 tensors.
//!
//! The op set is deliberately narrow: dense and batched matrix products,
//! causal dilated convolution, batch normalization, softmax, column maxpool,
//! embedding lookup, per-position dense layers and the pinball loss, plus
//! the elementwise glue between them.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod optim;
pub mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Mode, RunningStats, Var};
pub use init::{derive_seed, fnv1a, glorot_uniform};
pub use optim::AdamState;
pub use tensor::{ParameterStore, Result, Tensor, TensorError};
