//! Stride-1 "same" convolution: a patch-matrix (im2col + GEMM) fast path and
//! a direct-loop reference that the tests keep as the oracle.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatMut, MatRef, Tensor4};

/// Weights `(out, in, k, k)`, bias `(out)`, symmetric zero padding `(k-1)/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    weight: Tensor4<T>,
    bias: Vec<T>,
    padding: usize,
}

impl<T: Element> ConvKernel<T> {
    /// Kernel sizes are limited to 1x1 and 3x3; padding is derived from the size.
    pub fn new(weight: Tensor4<T>, bias: Vec<T>) -> Result<Self> {
        let [o, _, kh, kw] = weight.dims();
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(format!("unsupported kernel size {kh}x{kw}")));
        }
        if bias.len() != o {
            return Err(Error::shape(format!(
                "bias has {} entries for {o} outputs",
                bias.len()
            )));
        }
        if !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("kernel bias"));
        }
        Ok(Self {
            weight,
            bias,
            padding: (kh - 1) / 2,
        })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, ksize: usize) -> Result<Self> {
        Self::new(
            Tensor4::zeros([out_ch, in_ch, ksize, ksize]),
            vec![T::zero(); out_ch],
        )
    }

    /// 1x1 kernel from an `out x in` row-major matrix.
    pub fn pointwise(out_ch: usize, in_ch: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        Self::new(Tensor4::new([out_ch, in_ch, 1, 1], weights)?, bias)
    }

    #[inline]
    pub fn weight(&self) -> &Tensor4<T> {
        &self.weight
    }

    #[inline]
    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    #[inline]
    pub fn padding(&self) -> usize {
        self.padding
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    #[inline]
    pub fn ksize(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn cast<U: Element>(&self) -> ConvKernel<U> {
        ConvKernel {
            weight: self.weight.cast(),
            bias: crate::tensor::cast_slice(&self.bias),
            padding: self.padding,
        }
    }

    pub fn into_parts(self) -> (Tensor4<T>, Vec<T>) {
        (self.weight, self.bias)
    }
}

/// Value read outside the spatial extent of the input.
#[derive(Clone, Copy, Debug)]
pub enum Border<'a, T> {
    Zero,
    /// One constant per input channel.
    PerChannel(&'a [T]),
}

impl<T: Element> Border<'_, T> {
    #[inline]
    fn value(&self, channel: usize) -> T {
        match self {
            Border::Zero => T::zero(),
            Border::PerChannel(v) => v[channel],
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        match self {
            Border::PerChannel(v) if v.len() != channels => Err(Error::shape(format!(
                "border has {} values for {channels} channels",
                v.len()
            ))),
            _ => Ok(()),
        }
    }
}

fn check_inputs<T: Element>(x: &Tensor4<T>, k: &ConvKernel<T>) -> Result<()> {
    if x.channels() != k.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: k.in_channels(),
            actual: x.channels(),
        });
    }
    Ok(())
}

/// `out[b,o,h,w] = sum_{i,u,v} W[o,i,u,v] * x_pad[b,i,h+u,w+v] + bias[o]`.
pub fn conv2d<T: Element>(x: &Tensor4<T>, k: &ConvKernel<T>) -> Result<Tensor4<T>> {
    conv2d_with_border(x, k, Border::Zero)
}

/// Patch-matrix convolution with a configurable out-of-bounds value.
pub fn conv2d_with_border<T: Element>(
    x: &Tensor4<T>,
    k: &ConvKernel<T>,
    border: Border<'_, T>,
) -> Result<Tensor4<T>> {
    check_inputs(x, k)?;
    border.check(x.channels())?;
    let [nb, ci, h, w] = x.dims();
    let co = k.out_channels();
    let ks = k.ksize();
    let hw = h * w;
    let patch = ci * ks * ks;
    let mut out = vec![T::zero(); nb * co * hw];
    let mut cols = if ks == 1 {
        Vec::new()
    } else {
        vec![T::zero(); patch * hw]
    };

    for b in 0..nb {
        let src = x.item(b);
        let lhs = if ks == 1 {
            src
        } else {
            im2col(src, ci, h, w, ks, k.padding(), &border, &mut cols);
            &cols[..]
        };
        let dst = &mut out[b * co * hw..(b + 1) * co * hw];
        for (o, row) in dst.chunks_exact_mut(hw).enumerate() {
            row.fill(k.bias()[o]);
        }
        gemm(
            co,
            patch,
            hw,
            MatRef::row_major(k.weight().data(), patch),
            MatRef::row_major(lhs, hw),
            T::one(),
            MatMut::row_major(dst, hw),
        );
    }
    Tensor4::from_computed([nb, co, h, w], out, "conv2d")
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    src: &[T],
    ci: usize,
    h: usize,
    w: usize,
    ks: usize,
    pad: usize,
    border: &Border<'_, T>,
    cols: &mut [T],
) {
    let hw = h * w;
    for i in 0..ci {
        let plane = &src[i * hw..(i + 1) * hw];
        let fill = border.value(i);
        for u in 0..ks {
            for v in 0..ks {
                let row = &mut cols[((i * ks + u) * ks + v) * hw..][..hw];
                for oh in 0..h {
                    let ih = oh as isize + u as isize - pad as isize;
                    let dst = &mut row[oh * w..(oh + 1) * w];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(fill);
                        continue;
                    }
                    let line = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = ow as isize + v as isize - pad as isize;
                        *d = if iw < 0 || iw >= w as isize {
                            fill
                        } else {
                            line[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Direct seven-loop convolution accumulated in f64. Reference path.
pub fn conv2d_direct<T: Element>(x: &Tensor4<T>, k: &ConvKernel<T>) -> Result<Tensor4<T>> {
    conv2d_direct_with_border(x, k, Border::Zero)
}

pub fn conv2d_direct_with_border<T: Element>(
    x: &Tensor4<T>,
    k: &ConvKernel<T>,
    border: Border<'_, T>,
) -> Result<Tensor4<T>> {
    check_inputs(x, k)?;
    border.check(x.channels())?;
    let [nb, ci, h, w] = x.dims();
    let co = k.out_channels();
    let ks = k.ksize();
    let pad = k.padding() as isize;
    let wt = k.weight();
    let mut out = Vec::with_capacity(nb * co * h * w);
    for b in 0..nb {
        for o in 0..co {
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = k.bias()[o].as_f64();
                    for i in 0..ci {
                        for u in 0..ks {
                            for v in 0..ks {
                                let ih = oh as isize + u as isize - pad;
                                let iw = ow as isize + v as isize - pad;
                                let xv = if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize
                                {
                                    border.value(i)
                                } else {
                                    x.get(b, i, ih as usize, iw as usize)
                                };
                                acc += wt.get(o, i, u, v).as_f64() * xv.as_f64();
                            }
                        }
                    }
                    out.push(T::from_f64_lossy(acc));
                }
            }
        }
    }
    Tensor4::from_computed([nb, co, h, w], out, "conv2d_direct")
}
