//! Seeded parameter initialization helpers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::ops::ConvKernel;
use crate::tensor::{Element, Matrix, Tensor4};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fan-in He standard deviation `sqrt(2 / fan_in)`.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

pub fn normal_vec<T: Element>(rng: &mut impl Rng, len: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect()
}

pub fn standard_normal_vec<T: Element>(rng: &mut impl Rng, len: usize) -> Vec<T> {
    (0..len)
        .map(|_| T::from_f64_lossy(StandardNormal.sample(rng)))
        .collect()
}

/// He-normal conv weights with zero bias.
pub fn he_conv<T: Element>(
    rng: &mut impl Rng,
    out_ch: usize,
    in_ch: usize,
    ksize: usize,
) -> Result<ConvKernel<T>> {
    let std = he_std(in_ch * ksize * ksize);
    let w = normal_vec(rng, out_ch * in_ch * ksize * ksize, std);
    ConvKernel::new(
        Tensor4::new([out_ch, in_ch, ksize, ksize], w)?,
        vec![T::zero(); out_ch],
    )
}

/// He-normal conv weights with `N(0, bias_std^2)` bias.
pub fn he_conv_with_bias<T: Element>(
    rng: &mut impl Rng,
    out_ch: usize,
    in_ch: usize,
    ksize: usize,
    bias_std: f64,
) -> Result<ConvKernel<T>> {
    let std = he_std(in_ch * ksize * ksize);
    let w = normal_vec(rng, out_ch * in_ch * ksize * ksize, std);
    let b = normal_vec(rng, out_ch, bias_std);
    ConvKernel::new(Tensor4::new([out_ch, in_ch, ksize, ksize], w)?, b)
}

/// He-normal `fan_in x fan_out` matrix (applied as `x * W`).
pub fn he_matrix<T: Element>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix<T> {
    let data = normal_vec(rng, fan_in * fan_out, he_std(fan_in));
    Matrix::from_vec(fan_in, fan_out, data).expect("sized by construction")
}

pub fn standard_normal_tensor<T: Element>(rng: &mut impl Rng, dims: [usize; 4]) -> Tensor4<T> {
    let data = standard_normal_vec(rng, dims.iter().product());
    Tensor4::new(dims, data).expect("normal samples are finite")
}

pub fn standard_normal_matrix<T: Element>(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
) -> Matrix<T> {
    Matrix::from_vec(rows, cols, standard_normal_vec(rng, rows * cols))
        .expect("sized by construction")
}
