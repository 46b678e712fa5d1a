//! Token corruption applied to the embedded sequence before the decoder, a
//! denoising regularizer. Off unless explicitly requested.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Element, SeqTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Minimum fraction of tokens corrupted, in `[0, 1]`.
    pub p: f64,
    pub noise_low: u8,
    pub noise_high: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            p,
            noise_low: 0,
            noise_high: 255,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(format!(
                "corruption ratio {} outside [0, 1]",
                self.p
            )));
        }
        if self.noise_low > self.noise_high {
            return Err(Error::invalid("noise_low exceeds noise_high"));
        }
        Ok(())
    }

    /// Smallest count drawn for a sequence of `len` tokens: `ceil(p * len)`.
    pub fn min_count(&self, len: usize) -> usize {
        ((self.p * len as f64).ceil() as usize).min(len)
    }
}

#[derive(Clone, Debug)]
pub struct Corrupted<T = f32> {
    pub seq: SeqTensor<T>,
    /// `batch * len` flags, true where a token was replaced.
    pub mask: Vec<bool>,
    /// Tokens replaced per batch item.
    pub counts: Vec<usize>,
}

/// Per batch item: draw `n ~ U{ceil(p*l), ..., l}`, pick `n` distinct tokens
/// and overwrite each of their elements with `U{low..high} / 255`.
pub fn corrupt_sequence<T: Element>(
    x: &SeqTensor<T>,
    spec: &CorruptionSpec,
) -> Result<Corrupted<T>> {
    spec.validate()?;
    let mut rng = init::seeded(spec.seed);
    let (l, dim) = (x.len(), x.dim());
    let mut seq = x.clone();
    let mut mask = vec![false; x.batch() * l];
    let mut counts = Vec::with_capacity(x.batch());
    for b in 0..x.batch() {
        let n = rng.gen_range(spec.min_count(l)..=l);
        for t in index::sample(&mut rng, l, n) {
            mask[b * l + t] = true;
            for v in seq.token_mut(b, t) {
                let level = rng.gen_range(spec.noise_low..=spec.noise_high);
                *v = T::from_f64_lossy(level as f64 / 255.0);
            }
        }
        debug_assert_eq!(seq.token(b, 0).len(), dim);
        counts.push(n);
    }
    Ok(Corrupted { seq, mask, counts })
}
