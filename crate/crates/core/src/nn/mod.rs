//! Differentiable building blocks: tensors, a reverse-mode tape, dense and
//! transformer layers, AdamW and a finite-difference gradient checker.

pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use functional::{attention, cross_entropy, gelu, softmax};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{DenseLayer, LayerNorm, TransformerDims, TransformerLayer};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tensor::{Gradients, ParamId, ParamStore, Tensor};
