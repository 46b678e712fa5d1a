//! Inference kernels for scene-text super-resolution: activation-free
//! inverted residual blocks collapsed into one 3x3 convolution, and
//! linear-complexity self-attention with a softmax over a small low-level
//! similarity matrix.

pub mod alloc;
pub mod attention;
pub mod bench;
pub mod error;
pub mod format;
pub mod init;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod reparam;
pub mod tensor;

pub use error::{Error, Result};
pub use ops::ConvKernel;
pub use tensor::{Element, Matrix, SeqTensor, Tensor4};
