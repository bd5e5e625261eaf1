//! Small CPU tensor library with reverse-mode autodiff, convolution kernels
//! and an Adam optimizer. Generic over `f32` and `f64`.

pub mod conv;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use tensor::{gemm, Real, Tensor};
