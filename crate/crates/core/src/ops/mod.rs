//! Dense kernels: convolution, activations, pooling, pixel shuffle,
//! normalization and token embeddings.

mod activation;
mod conv;
mod embed;
mod norm;
mod pool;
mod shuffle;

pub use activation::{softmax_in_place, softmax_rows, Activation};
pub use conv::{
    conv2d, conv2d_direct, conv2d_direct_with_border, conv2d_with_border, Border, ConvKernel,
};
pub use embed::{add_pos_embed, flatten_spatial, sinusoidal_pos_embed, unflatten_spatial};
pub use norm::{batch_norm_inference, layer_norm, DEFAULT_EPS};
pub use pool::{adaptive_max_pool2d, max_pool2d};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
