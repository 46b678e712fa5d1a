//! 8-bit RGB images, PNG I/O and the two usual fidelity scores.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

pub const PSNR_CAP_DB: f64 = 100.0;
const MAX_VALUE: f64 = 255.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image dimensions must be at least 1"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize, usize) -> u8,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend((0..3).map(|c| f(x, y, c)));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Any format the decoder understands is converted to 8-bit RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img =
            image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .ok_or_else(|| Error::shape("pixel buffer does not match dimensions"))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// `1 x C x H x W` in `[0, 1]`. One channel takes the mean of R, G, B.
    pub fn to_tensor<T: Element>(&self, channels: usize) -> Result<Tensor4<T>> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "images map to 1 or 3 channels, not {channels}"
            )));
        }
        let (h, w) = (self.height, self.width);
        Tensor4::new(
            [1, channels, h, w],
            (0..channels * h * w)
                .map(|i| {
                    let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                    let v = if channels == 3 {
                        f64::from(self.get(x, y, c))
                    } else {
                        (0..3).map(|c| f64::from(self.get(x, y, c))).sum::<f64>() / 3.0
                    };
                    T::from_f64_lossy(v / MAX_VALUE)
                })
                .collect(),
        )
    }

    /// Batch item `b` of a 1- or 3-channel tensor, clamped to `[0, 1]` and
    /// rounded to the nearest level.
    pub fn from_tensor<T: Element>(t: &Tensor4<T>, b: usize) -> Result<Self> {
        let [n, c, h, w] = t.dims();
        if b >= n {
            return Err(Error::invalid(format!("batch item {b} out of {n}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::invalid(format!(
                "images map from 1 or 3 channels, not {c}"
            )));
        }
        let to_u8 = |v: T| (v.as_f64().clamp(0.0, 1.0) * MAX_VALUE).round() as u8;
        Self::from_fn(w, h, |x, y, ch| {
            to_u8(t.get(b, if c == 3 { ch } else { 0 }, y, x))
        })
    }
}

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels, capped at 100 dB.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b)?;
    let sse: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = sse / a.pixels.len() as f64;
    Ok((10.0 * (MAX_VALUE * MAX_VALUE / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let centre = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - centre).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over
/// channels. Only windows fully inside the image count; images smaller than
/// the window use the largest odd window that fits.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b)?;
    let (w, h) = (a.width, a.height);
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size);
    let c1 = (K1 * MAX_VALUE).powi(2);
    let c2 = (K2 * MAX_VALUE).powi(2);
    let (ow, oh) = (w - size + 1, h - size + 1);

    let mut total = 0.0;
    for c in 0..3 {
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wt = gy * gx;
                        let x = f64::from(a.get(ox + dx, oy + dy, c));
                        let y = f64::from(b.get(ox + dx, oy + dy, c));
                        mx += wt * x;
                        my += wt * y;
                        xx += wt * x * x;
                        yy += wt * y * y;
                        xy += wt * (x * y);
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let mm = mx * my;
                let cov = xy - mm;
                total += ((2.0 * mm + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok(total / (3 * ow * oh) as f64)
}
