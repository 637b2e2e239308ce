//! Minimal differentiable numeric core: dense `f64` tensors, a recording
//! graph for reverse-mode gradients, parameter storage and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod ops;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_TOLERANCE};
pub use graph::{Gradients, Graph, Var};
pub use ops::{gelu, layer_norm, masked_softmax, matmul, sigmoid};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
