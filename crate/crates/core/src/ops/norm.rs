use crate::error::{Error, Result};
use crate::tensor::{Element, SeqTensor, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Normalizes every token over `model_dim` (biased variance).
pub fn layer_norm<T: Element>(
    x: &SeqTensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<SeqTensor<T>> {
    let dim = x.dim();
    if gamma.len() != dim || beta.len() != dim {
        return Err(Error::shape(format!(
            "layer norm params ({}, {}) for model dim {dim}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = x.clone();
    if dim == 0 {
        return Ok(out);
    }
    let inv_dim = 1.0 / dim as f64;
    for tok in out.data_mut().chunks_exact_mut(dim) {
        let mean = tok.iter().map(|v| v.as_f64()).sum::<f64>() * inv_dim;
        let var = tok.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() * inv_dim;
        let inv_std = 1.0 / (var + eps.as_f64()).sqrt();
        for ((v, &g), &b) in tok.iter_mut().zip(gamma).zip(beta) {
            *v = T::from_f64_lossy((v.as_f64() - mean) * inv_std) * g + b;
        }
    }
    SeqTensor::from_computed(
        out.batch(),
        out.len(),
        dim,
        out.data().to_vec(),
        "layer norm",
    )
}

/// Per-channel affine normalization with fixed statistics.
pub fn batch_norm_inference<T: Element>(
    x: &Tensor4<T>,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Tensor4<T>> {
    let c = x.channels();
    if [mean.len(), var.len(), gamma.len(), beta.len()]
        .iter()
        .any(|&l| l != c)
    {
        return Err(Error::shape(format!(
            "batch norm params do not match {c} channels"
        )));
    }
    let [nb, _, h, w] = x.dims();
    let mut out = x.clone();
    let plane = h * w;
    for b in 0..nb {
        for ch in 0..c {
            let scale = gamma[ch] / (var[ch] + eps).sqrt();
            let shift = beta[ch] - mean[ch] * scale;
            let start = (b * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor4::from_computed(out.dims(), out.into_vec(), "batch norm")
}
