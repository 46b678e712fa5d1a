use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

/// `(n, C*r*r, H, W) -> (n, C, rH, rW)` with
/// `out[b, c, r*h+u, r*w+v] = x[b, c*r*r + u*r + v, h, w]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let [nb, c, h, w] = x.dims();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(format!("{c} channels not divisible by {r}^2")));
    }
    let oc = c / (r * r);
    let mut out = Tensor4::zeros([nb, oc, h * r, w * r]);
    for b in 0..nb {
        for co in 0..oc {
            for u in 0..r {
                for v in 0..r {
                    let ci = co * r * r + u * r + v;
                    for hh in 0..h {
                        for ww in 0..w {
                            out.set(b, co, hh * r + u, ww * r + v, x.get(b, ci, hh, ww));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let [nb, c, h, w] = x.dims();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(format!(
            "spatial {h}x{w} not divisible by {r}"
        )));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor4::zeros([nb, c * r * r, oh, ow]);
    for b in 0..nb {
        for ci in 0..c {
            for u in 0..r {
                for v in 0..r {
                    let co = ci * r * r + u * r + v;
                    for hh in 0..oh {
                        for ww in 0..ow {
                            out.set(b, co, hh, ww, x.get(b, ci, hh * r + u, ww * r + v));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
