//! Minimal dense tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod kernels;
mod value;

pub use gradcheck::{finite_diff_check, finite_diff_check_at, DEFAULT_STEP};
pub use graph::{sigmoid, Activation, BnMode, Graph, ReduceKind, RunningStats, Var};
pub use value::Tensor;
