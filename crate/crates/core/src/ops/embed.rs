//! Spatial-wise token embedding: one token per pixel carrying its channel vector.

use crate::error::{Error, Result};
use crate::tensor::{Element, Matrix, SeqTensor, Tensor4};

/// `(n, C, H, W) -> (n, H*W, C)`; token `h*W + w` holds the channels at `(h, w)`.
pub fn flatten_spatial<T: Element>(x: &Tensor4<T>) -> SeqTensor<T> {
    let [nb, c, h, w] = x.dims();
    let n = h * w;
    let mut data = vec![T::zero(); nb * n * c];
    for b in 0..nb {
        let src = x.item(b);
        let dst = &mut data[b * n * c..(b + 1) * n * c];
        for ch in 0..c {
            for (t, &v) in src[ch * n..(ch + 1) * n].iter().enumerate() {
                dst[t * c + ch] = v;
            }
        }
    }
    SeqTensor::new(nb, n, c, data).expect("flatten preserves finiteness")
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial<T: Element>(s: &SeqTensor<T>, h: usize, w: usize) -> Result<Tensor4<T>> {
    if s.len() != h * w {
        return Err(Error::shape(format!(
            "sequence length {} is not {h}x{w}",
            s.len()
        )));
    }
    let (nb, n, c) = (s.batch(), s.len(), s.dim());
    let mut data = vec![T::zero(); nb * c * n];
    for b in 0..nb {
        let src = &s.data()[b * n * c..(b + 1) * n * c];
        let dst = &mut data[b * c * n..(b + 1) * c * n];
        for t in 0..n {
            for ch in 0..c {
                dst[ch * n + t] = src[t * c + ch];
            }
        }
    }
    Tensor4::new([nb, c, h, w], data)
}

/// Sine/cosine position table: row `t`, column `2i` is `sin(t * f_i)` and
/// column `2i+1` is `cos(t * f_i)` with `f_i = 10000^(-2i/dim)`.
pub fn sinusoidal_pos_embed<T: Element>(len: usize, dim: usize) -> Result<Matrix<T>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "positional embedding needs even dim, got {dim}"
        )));
    }
    Ok(Matrix::from_fn(len, dim, |t, col| {
        let i = col / 2;
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let angle = t as f64 * freq;
        T::from_f64_lossy(if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        })
    }))
}

/// Adds the same `len x dim` table to every batch item.
pub fn add_pos_embed<T: Element>(x: &SeqTensor<T>, table: &Matrix<T>) -> Result<SeqTensor<T>> {
    if table.rows() != x.len() || table.cols() != x.dim() {
        return Err(Error::shape("positional table does not match sequence"));
    }
    let mut out = x.clone();
    let stride = x.len() * x.dim();
    for item in out.data_mut().chunks_exact_mut(stride.max(1)) {
        for (v, &p) in item.iter_mut().zip(table.data()) {
            *v = *v + p;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_pixel_is_single_token() {
        let x = Tensor4::<f32>::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let s = flatten_spatial(&x);
        assert_eq!((s.len(), s.dim()), (1, 3));
        assert_eq!(s.token(0, 0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn token_index_arithmetic() {
        let x = Tensor4::<f32>::from_fn([1, 2, 2, 3], |[_, c, h, w]| (c * 100 + h * 10 + w) as f32);
        let s = flatten_spatial(&x);
        // token 4 = h*W + w with W = 3 -> (h=1, w=1)
        assert_eq!(s.token(0, 4), &[11.0, 111.0]);
    }

    #[test]
    fn roundtrip_is_identity() {
        let x = Tensor4::<f32>::from_fn([2, 3, 4, 5], |[b, c, h, w]| {
            (b * 1000 + c * 100 + h * 10 + w) as f32 * 0.5
        });
        let s = flatten_spatial(&x);
        assert_eq!(unflatten_spatial(&s, 4, 5).unwrap(), x);
        assert!(unflatten_spatial(&s, 5, 5).is_err());
    }

    #[test]
    fn sinusoid_values() {
        let pe = sinusoidal_pos_embed::<f64>(5, 8).unwrap();
        for c in 0..8 {
            assert_eq!(pe.get(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert_abs_diff_eq!(pe.get(1, 0), 0.8415, epsilon = 1e-4);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(sinusoidal_pos_embed::<f32>(3, 5).is_err());
    }
}
