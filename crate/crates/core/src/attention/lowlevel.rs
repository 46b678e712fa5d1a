use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::ops::{adaptive_max_pool2d, conv2d, Activation, ConvKernel};
use crate::tensor::{Element, Matrix, Tensor4};

/// Two conv blocks and a max pool that turn a feature map into the `d x d`
/// similarity matrix consumed by shrinking attention.
#[derive(Clone, Debug, PartialEq)]
pub struct LowLevelGenParams<T = f32> {
    conv1: ConvKernel<T>,
    conv2: ConvKernel<T>,
    target_dim: usize,
}

impl<T: Element> LowLevelGenParams<T> {
    pub fn new(conv1: ConvKernel<T>, conv2: ConvKernel<T>, target_dim: usize) -> Result<Self> {
        if conv1.ksize() != 3 || conv2.ksize() != 3 {
            return Err(Error::shape("generator convolutions must be 3x3"));
        }
        if conv2.in_channels() != conv1.out_channels() || conv2.out_channels() != 1 {
            return Err(Error::shape(format!(
                "generator schedule {}->{}->{} must end in one channel",
                conv1.in_channels(),
                conv2.in_channels(),
                conv2.out_channels()
            )));
        }
        if target_dim == 0 {
            return Err(Error::invalid("generator target dim must be positive"));
        }
        Ok(Self {
            conv1,
            conv2,
            target_dim,
        })
    }

    /// Channel schedule `C -> max(C/2, 1) -> 1`, He-normal weights, zero bias.
    pub fn he_init(rng: &mut impl Rng, channels: usize, target_dim: usize) -> Result<Self> {
        let mid = hidden_channels(channels);
        Self::new(
            init::he_conv(rng, mid, channels, 3)?,
            init::he_conv(rng, 1, mid, 3)?,
            target_dim,
        )
    }

    pub fn conv1(&self) -> &ConvKernel<T> {
        &self.conv1
    }

    pub fn conv2(&self) -> &ConvKernel<T> {
        &self.conv2
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }
}

pub fn hidden_channels(channels: usize) -> usize {
    (channels / 2).max(1)
}

/// conv1 -> ReLU -> conv2 -> ReLU -> adaptive max pool to `d x d`, one
/// matrix per batch item.
pub fn low_level_similarity<T: Element>(
    feature: &Tensor4<T>,
    g: &LowLevelGenParams<T>,
) -> Result<Vec<Matrix<T>>> {
    if feature.channels() != g.conv1.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: g.conv1.in_channels(),
            actual: feature.channels(),
        });
    }
    let relu = Activation::Relu;
    let h1 = conv2d(feature, &g.conv1)?.map(|v| relu.apply(v));
    let h2 = conv2d(&h1, &g.conv2)?.map(|v| relu.apply(v));
    let pooled = adaptive_max_pool2d(&h2, g.target_dim, g.target_dim)?;
    let d = g.target_dim;
    (0..pooled.batch())
        .map(|b| Matrix::from_vec(d, d, pooled.item(b).to_vec()))
        .collect()
}
