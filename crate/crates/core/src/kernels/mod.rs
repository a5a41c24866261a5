//! Numerical kernels shared by every network block.

mod activation;
mod conv;
mod counter;
mod gemm;
mod norm;
mod pool;
mod softmax;

pub use activation::{activation, gelu, sigmoid, Activation};
pub use conv::{conv2d, conv2d_auto, conv2d_im2col, conv_transpose2d, im2col, ConvSpec, SUPPORTED_UPSAMPLE_FACTORS};
pub use counter::{count_kernel_macs, kernel_macs};
pub use gemm::{linear, matmul};
pub use norm::{batch_norm_inference, BatchNorm, BN_EPS};
pub use pool::{adaptive_avg_pool2d, global_avg_pool};
pub use softmax::softmax_rows;

pub(crate) use activation::gelu_in_place;
pub(crate) use gemm::{gemm, MatRef};
pub(crate) use softmax::softmax_in_place;
