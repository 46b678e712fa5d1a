//! Collapsing an activation-free inverted residual block
//! (1x1 expand -> 3x3 spatial -> 1x1 project, plus identity skip) into a
//! single 3x3 convolution.
//!
//! The expand layer's bias reaches the spatial layer's padded border too, so
//! the unfused spatial convolution pads its input with the expand bias rather
//! than zero. That is what the merged bias term `sum W1 * B0` assumes, and it
//! makes the fused and unfused forwards agree at every pixel, borders included.
//!
//! Kernel merging is carried out in f64 and rounded once at the end.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{RawTensor, TensorDir};
use crate::init;
use crate::ops::{conv2d, conv2d_with_border, Border, ConvKernel};
use crate::tensor::{Element, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct RirbParams<T = f32> {
    expand: ConvKernel<T>,
    spatial: ConvKernel<T>,
    project: ConvKernel<T>,
    use_skip: bool,
}

impl<T: Element> RirbParams<T> {
    pub fn new(
        expand: ConvKernel<T>,
        spatial: ConvKernel<T>,
        project: ConvKernel<T>,
        use_skip: bool,
    ) -> Result<Self> {
        let c_in = expand.in_channels();
        let c_mid = expand.out_channels();
        if expand.ksize() != 1 || spatial.ksize() != 3 || project.ksize() != 1 {
            return Err(Error::shape("block must be 1x1 -> 3x3 -> 1x1"));
        }
        if c_in == 0 || c_mid == 0 || !c_mid.is_multiple_of(c_in) {
            return Err(Error::shape(format!(
                "expanded width {c_mid} is not a positive multiple of {c_in}"
            )));
        }
        if spatial.in_channels() != c_mid || spatial.out_channels() != c_mid {
            return Err(Error::shape(format!(
                "spatial conv is {}->{}, expected {c_mid}->{c_mid}",
                spatial.in_channels(),
                spatial.out_channels()
            )));
        }
        if project.in_channels() != c_mid {
            return Err(Error::ChannelMismatch {
                expected: c_mid,
                actual: project.in_channels(),
            });
        }
        if use_skip && project.out_channels() != c_in {
            return Err(Error::shape(format!(
                "identity skip needs equal widths, got {c_in}->{}",
                project.out_channels()
            )));
        }
        Ok(Self {
            expand,
            spatial,
            project,
            use_skip,
        })
    }

    pub fn expand(&self) -> &ConvKernel<T> {
        &self.expand
    }

    pub fn spatial(&self) -> &ConvKernel<T> {
        &self.spatial
    }

    pub fn project(&self) -> &ConvKernel<T> {
        &self.project
    }

    pub fn use_skip(&self) -> bool {
        self.use_skip
    }

    pub fn in_channels(&self) -> usize {
        self.expand.in_channels()
    }

    pub fn mid_channels(&self) -> usize {
        self.expand.out_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.project.out_channels()
    }

    pub fn expand_ratio(&self) -> usize {
        self.mid_channels() / self.in_channels()
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.spatial.param_count() + self.project.param_count()
    }

    pub fn cast<U: Element>(&self) -> RirbParams<U> {
        RirbParams {
            expand: self.expand.cast(),
            spatial: self.spatial.cast(),
            project: self.project.cast(),
            use_skip: self.use_skip,
        }
    }

    /// Square block with He-normal weights and zero biases.
    pub fn he_init(
        rng: &mut impl Rng,
        channels: usize,
        ratio: usize,
        use_skip: bool,
    ) -> Result<Self> {
        let mid = channels * ratio;
        Self::new(
            init::he_conv(rng, mid, channels, 1)?,
            init::he_conv(rng, mid, mid, 3)?,
            init::he_conv(rng, channels, mid, 1)?,
            use_skip,
        )
    }

    /// He-normal weights and `N(0, bias_std^2)` biases on every layer.
    pub fn random(
        rng: &mut impl Rng,
        c_in: usize,
        ratio: usize,
        c_out: usize,
        use_skip: bool,
        bias_std: f64,
    ) -> Result<Self> {
        let mid = c_in * ratio;
        Self::new(
            init::he_conv_with_bias(rng, mid, c_in, 1, bias_std)?,
            init::he_conv_with_bias(rng, mid, mid, 3, bias_std)?,
            init::he_conv_with_bias(rng, c_out, mid, 1, bias_std)?,
            use_skip,
        )
    }

    /// Three convolutions in sequence, then the skip if enabled.
    pub fn forward_unfused(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        rirb_forward_unfused(self, x)
    }
}

impl RirbParams<f32> {
    pub fn to_tensor_dir(&self) -> TensorDir {
        let mut dir = TensorDir::default();
        dir.insert_conv("expand", &self.expand);
        dir.insert_conv("spatial", &self.spatial);
        dir.insert_conv("project", &self.project);
        dir.meta = serde_json::json!({ "use_skip": self.use_skip });
        dir
    }

    pub fn from_tensor_dir(dir: &TensorDir) -> Result<Self> {
        let use_skip = dir
            .meta
            .get("use_skip")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| Error::Config("manifest meta lacks boolean `use_skip`".into()))?;
        Self::new(
            dir.conv("expand")?,
            dir.conv("spatial")?,
            dir.conv("project")?,
            use_skip,
        )
    }
}

pub fn rirb_forward_unfused<T: Element>(p: &RirbParams<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.channels() != p.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: p.in_channels(),
            actual: x.channels(),
        });
    }
    let expanded = conv2d(x, &p.expand)?;
    let mixed = conv2d_with_border(&expanded, &p.spatial, Border::PerChannel(p.expand.bias()))?;
    let out = conv2d(&mixed, &p.project)?;
    if p.use_skip {
        out.add(x)
    } else {
        Ok(out)
    }
}

/// A whole block folded into one 3x3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T = f32> {
    kernel: ConvKernel<T>,
}

/// JSON sidecar written next to a fused kernel's weight and bias files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct FusedSidecar {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub pad: usize,
}

impl<T: Element> FusedConv<T> {
    pub fn new(kernel: ConvKernel<T>) -> Result<Self> {
        if kernel.ksize() != 3 {
            return Err(Error::shape("fused kernel must be 3x3"));
        }
        Ok(Self { kernel })
    }

    pub fn kernel(&self) -> &ConvKernel<T> {
        &self.kernel
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d(x, &self.kernel)
    }

    pub fn sidecar(&self) -> FusedSidecar {
        FusedSidecar {
            in_ch: self.kernel.in_channels(),
            out_ch: self.kernel.out_channels(),
            ksize: self.kernel.ksize(),
            pad: self.kernel.padding(),
        }
    }
}

impl FusedConv<f32> {
    /// Writes `weight.etsr`, `bias.etsr` and `fused.json` into `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::format::write_tensor(
            &dir.join("weight.etsr"),
            &RawTensor::from_tensor4(self.kernel.weight()),
        )?;
        crate::format::write_tensor(
            &dir.join("bias.etsr"),
            &RawTensor::from_vector(self.kernel.bias()),
        )?;
        std::fs::write(
            dir.join("fused.json"),
            serde_json::to_vec_pretty(&self.sidecar())?,
        )?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let sidecar: FusedSidecar =
            serde_json::from_slice(&std::fs::read(dir.join("fused.json"))?)?;
        let w = crate::format::read_tensor(&dir.join("weight.etsr"))?.to_tensor4()?;
        let b = crate::format::read_tensor(&dir.join("bias.etsr"))?.to_vector()?;
        let fused = Self::new(ConvKernel::new(w, b)?)?;
        if fused.sidecar() != sidecar {
            return Err(Error::Config(format!(
                "sidecar {sidecar:?} disagrees with tensors"
            )));
        }
        Ok(fused)
    }
}

fn to_f64<T: Element>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Element>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64_lossy).collect()
}

/// Folds a 1x1 conv followed by a 3x3 conv into one 3x3 conv:
/// `W[m,i,u,v] = sum_c W1[m,c,u,v] * W0[c,i]` and
/// `B[m] = sum_{c,u,v} W1[m,c,u,v] * B0[c] + B1[m]`.
pub fn merge_1x1_3x3<T: Element>(k0: &ConvKernel<T>, k1: &ConvKernel<T>) -> Result<ConvKernel<T>> {
    if k0.ksize() != 1 || k1.ksize() != 3 {
        return Err(Error::shape("merge_1x1_3x3 takes a 1x1 then a 3x3 kernel"));
    }
    let (ci, cm) = (k0.in_channels(), k0.out_channels());
    if k1.in_channels() != cm {
        return Err(Error::ChannelMismatch {
            expected: cm,
            actual: k1.in_channels(),
        });
    }
    let co = k1.out_channels();
    let w0 = to_f64(k0.weight().data());
    let b0 = to_f64(k0.bias());
    let w1 = to_f64(k1.weight().data());

    let mut w = vec![0.0f64; co * ci * 9];
    let mut b = to_f64(k1.bias());
    for m in 0..co {
        for c in 0..cm {
            let taps = &w1[(m * cm + c) * 9..(m * cm + c + 1) * 9];
            b[m] += taps.iter().sum::<f64>() * b0[c];
            for i in 0..ci {
                let scale = w0[c * ci + i];
                let dst = &mut w[(m * ci + i) * 9..(m * ci + i + 1) * 9];
                for (d, &t) in dst.iter_mut().zip(taps) {
                    *d += t * scale;
                }
            }
        }
    }
    ConvKernel::new(Tensor4::new([co, ci, 3, 3], from_f64(w))?, from_f64(b))
}

/// Folds a 3x3 conv followed by a 1x1 conv into one 3x3 conv:
/// `W[o,i,u,v] = sum_c W2[o,c] * W01[c,i,u,v]` and
/// `B[o] = sum_c W2[o,c] * B01[c] + B2[o]`.
pub fn merge_3x3_1x1<T: Element>(k01: &ConvKernel<T>, k2: &ConvKernel<T>) -> Result<ConvKernel<T>> {
    if k01.ksize() != 3 || k2.ksize() != 1 {
        return Err(Error::shape("merge_3x3_1x1 takes a 3x3 then a 1x1 kernel"));
    }
    let (ci, cm) = (k01.in_channels(), k01.out_channels());
    if k2.in_channels() != cm {
        return Err(Error::ChannelMismatch {
            expected: cm,
            actual: k2.in_channels(),
        });
    }
    let co = k2.out_channels();
    let w01 = to_f64(k01.weight().data());
    let b01 = to_f64(k01.bias());
    let w2 = to_f64(k2.weight().data());

    // one (co x cm) * (cm x ci*9) product covers all nine taps at once
    let span = ci * 9;
    let mut w = vec![0.0f64; co * span];
    let mut b = to_f64(k2.bias());
    for o in 0..co {
        let dst = &mut w[o * span..(o + 1) * span];
        for c in 0..cm {
            let scale = w2[o * cm + c];
            b[o] += scale * b01[c];
            for (d, &s) in dst.iter_mut().zip(&w01[c * span..(c + 1) * span]) {
                *d += scale * s;
            }
        }
    }
    ConvKernel::new(Tensor4::new([co, ci, 3, 3], from_f64(w))?, from_f64(b))
}

/// Identity map as a 3x3 kernel: a single centre tap of 1 on the diagonal.
pub fn identity_kernel<T: Element>(channels: usize) -> Result<ConvKernel<T>> {
    if channels == 0 {
        return Err(Error::invalid("identity kernel needs at least one channel"));
    }
    let mut w = Tensor4::zeros([channels, channels, 3, 3]);
    for c in 0..channels {
        w.set(c, c, 1, 1, T::one());
    }
    ConvKernel::new(w, vec![T::zero(); channels])
}

/// Collapses the block: merge expand into spatial, then project, then add the
/// identity kernel when the skip is on.
pub fn fuse_rirb<T: Element>(p: &RirbParams<T>) -> Result<FusedConv<T>> {
    let head = merge_1x1_3x3(&p.expand, &p.spatial)?;
    let merged = merge_3x3_1x1(&head, &p.project)?;
    if !p.use_skip {
        return FusedConv::new(merged);
    }
    let eye = identity_kernel::<T>(p.in_channels())?;
    let (mut w, bias) = merged.into_parts();
    for (d, &e) in w.data_mut().iter_mut().zip(eye.weight().data()) {
        *d = *d + e;
    }
    FusedConv::new(ConvKernel::new(w, bias)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub trials: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Input shape used by [`verify_fusion`]: `batch x C x height x width`.
pub const VERIFY_SHAPE: [usize; 3] = [4, 8, 16];

/// Compares fused and unfused forwards on `trials` seeded `N(0,1)` inputs.
pub fn verify_fusion<T: Element>(
    p: &RirbParams<T>,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<FusionReport> {
    if trials == 0 {
        return Err(Error::invalid("verify_fusion needs at least one trial"));
    }
    let fused = fuse_rirb(p)?;
    let mut rng = init::seeded(seed);
    let [nb, h, w] = VERIFY_SHAPE;
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let x = init::standard_normal_tensor::<T>(&mut rng, [nb, p.in_channels(), h, w]);
        let reference = rirb_forward_unfused(p, &x)?;
        let got = fused.forward(&x)?;
        let abs = got.max_abs_diff(&reference);
        let scale = reference
            .data()
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(if scale > 0.0 { abs / scale } else { abs });
    }
    Ok(FusionReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        trials,
        tol,
        pass: max_abs <= tol,
    })
}
