//! Deterministic tensor arithmetic, reverse-mode autodiff, and the numeric
//! utilities built on them.

mod gradcheck;
mod graph;
mod optim;
mod rng;
pub mod serialize;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_report, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use rng::{fnv1a, Rng};
pub use tensor::{gelu, layer_norm, mean_over_axis, softmax, Tensor};
