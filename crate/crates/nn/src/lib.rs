//! Minimal reverse-mode autodiff over NCHW tensors.
//!
//! Supports the layer vocabulary needed by the segmentation U-Net and the
//! conditional GAN: dense, strided/padded convolution and its transpose,
//! pooling, channel concatenation, multiplicative gating, and the usual
//! pointwise activations. Matrix products go through `matrixmultiply`.

mod conv;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use conv::ConvGeom;
pub use graph::{avg_pool2, sigmoid, Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{glorot_uniform, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("malformed blob: {0}")]
    Blob(String),
}
