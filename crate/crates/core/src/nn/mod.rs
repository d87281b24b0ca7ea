//! Minimal tensor and reverse-mode autodiff machinery used by the
//! watermarking networks and the perturbation crafter.

mod adam;
mod conv;
mod graph;
mod init;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{sigmoid, Gradients, Graph, ParamKey, SpatialMap, Var};
pub use init::{he_normal, ParamSet};
pub use scalar::{gemm, Layout, Scalar};
pub use tensor::Tensor;
