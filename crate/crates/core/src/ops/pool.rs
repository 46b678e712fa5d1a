use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

/// Max pooling with a square window, no padding.
pub fn max_pool2d<T: Element>(x: &Tensor4<T>, window: usize, stride: usize) -> Result<Tensor4<T>> {
    let [nb, c, h, w] = x.dims();
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!(
            "pool window {window} exceeds input {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    pool_bins(
        x,
        [nb, c, oh, ow],
        |i| (i * stride, i * stride + window),
        |j| (j * stride, j * stride + window),
    )
}

/// Partitions each spatial axis into near-equal bins:
/// bin `i` of `out` covers `[floor(i*len/out), ceil((i+1)*len/out))`, never empty.
pub fn adaptive_max_pool2d<T: Element>(
    x: &Tensor4<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor4<T>> {
    let [nb, c, h, w] = x.dims();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "adaptive pool needs non-empty input and output",
        ));
    }
    pool_bins(
        x,
        [nb, c, out_h, out_w],
        |i| adaptive_bin(i, h, out_h),
        |j| adaptive_bin(j, w, out_w),
    )
}

#[inline]
fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn pool_bins<T: Element>(
    x: &Tensor4<T>,
    dims: [usize; 4],
    rows: impl Fn(usize) -> (usize, usize),
    cols: impl Fn(usize) -> (usize, usize),
) -> Result<Tensor4<T>> {
    let [nb, c, oh, ow] = dims;
    let mut out = Vec::with_capacity(nb * c * oh * ow);
    for b in 0..nb {
        for ch in 0..c {
            for i in 0..oh {
                let (h0, h1) = rows(i);
                for j in 0..ow {
                    let (w0, w1) = cols(j);
                    let mut m = T::neg_infinity();
                    for hh in h0..h1 {
                        for ww in w0..w1 {
                            m = m.max(x.get(b, ch, hh, ww));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor4::from_computed(dims, out, "max pool")
}
