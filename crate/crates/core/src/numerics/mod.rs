//! Dense `f32` tensors, a reverse-mode tape, the layer primitives built on it,
//! and the Adam optimizer.

mod adam;
pub mod ctt;
mod conv;
mod gemm;
mod graph;
mod linear;
mod norm;
mod resize;
mod tensor;

pub use adam::AdamState;
pub use conv::{conv2d_reference, Pooled};
pub use graph::{Graph, Var};
pub use norm::{Mode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use resize::bilinear_resize;
pub use tensor::Tensor;

pub(crate) use linear::softmax_kernel;
