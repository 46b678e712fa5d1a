//! Self-attention in three evaluation strategies.
//!
//! * vanilla: `softmax(Q Kᵀ / sqrt(d)) V`, materializing the `n x n` map;
//! * kernel: `φ(Q) (φ(K)ᵀ V)`, linear in `n`;
//! * shrinking: `φ(Q) ((softmax(S) φ(K)ᵀ) V)` where `S` is a `d x d`
//!   similarity matrix produced from the spatial feature map, so the softmax
//!   runs over `d x d` entries instead of `n x n`.
//!
//! Every path reports the auxiliary buffers it allocates to an [`AuxMeter`],
//! which is what the benchmark harness records as memory.

mod corrupt;
mod lowlevel;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{softmax_in_place, softmax_rows, Activation};
use crate::tensor::{Element, Matrix, SeqTensor};

pub use corrupt::{corrupt_sequence, Corrupted, CorruptionSpec};
pub use lowlevel::{low_level_similarity, LowLevelGenParams};

/// Feature map used by the linear variants unless told otherwise.
pub const DEFAULT_FEATURE_MAP: Activation = Activation::EluPlusOne;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Vanilla,
    Kernel,
    Shrinking,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [
        AttentionVariant::Vanilla,
        AttentionVariant::Kernel,
        AttentionVariant::Shrinking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Vanilla => "vanilla",
            AttentionVariant::Kernel => "kernel",
            AttentionVariant::Shrinking => "shrinking",
        }
    }
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(AttentionVariant::Vanilla),
            "kernel" => Ok(AttentionVariant::Kernel),
            "shrinking" => Ok(AttentionVariant::Shrinking),
            other => Err(Error::invalid(format!(
                "unknown attention variant `{other}`"
            ))),
        }
    }
}

/// Tracks live and peak auxiliary element counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AuxMeter {
    live: usize,
    peak: usize,
}

impl AuxMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, elems: usize) {
        self.live += elems;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, elems: usize) {
        self.live = self.live.saturating_sub(elems);
    }

    /// Peak number of auxiliary elements held at once.
    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn live(&self) -> usize {
        self.live
    }
}

fn check_qkv<T: Element>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "attention operands Q {}x{}, K {}x{}, V {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    Ok(())
}

fn finite<T: Element>(m: Matrix<T>, op: &'static str) -> Result<Matrix<T>> {
    if m.all_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite(op))
    }
}

pub fn vanilla_attention<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Matrix<T>> {
    vanilla_attention_metered(q, k, v, &mut AuxMeter::new())
}

/// `softmax(Q Kᵀ / sqrt(d)) V` with the full `n x n` score matrix.
pub fn vanilla_attention_metered<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    meter: &mut AuxMeter,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    let scale = T::from_f64_lossy(1.0 / (q.cols().max(1) as f64).sqrt());
    let mut scores = q.matmul_t(k)?;
    meter.alloc(scores.data().len());
    let cols = scores.cols();
    if cols > 0 {
        for row in scores.data_mut().chunks_exact_mut(cols) {
            row.iter_mut().for_each(|s| *s = *s * scale);
            softmax_in_place(row);
        }
    }
    let out = scores.matmul(v)?;
    meter.free(scores.data().len());
    finite(out, "vanilla attention")
}

pub fn kernel_linear_attention<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    phi: Activation,
) -> Result<Matrix<T>> {
    kernel_linear_attention_metered(q, k, v, phi, &mut AuxMeter::new())
}

/// `φ(Q) (φ(K)ᵀ V)`; auxiliary storage peaks at `nd + d·d_v`.
pub fn kernel_linear_attention_metered<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    phi: Activation,
    meter: &mut AuxMeter,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    let fk = phi.apply_matrix(k);
    meter.alloc(fk.data().len());
    let kv = fk.t_matmul(v)?;
    meter.alloc(kv.data().len());
    meter.free(fk.data().len());
    drop(fk);
    let fq = phi.apply_matrix(q);
    meter.alloc(fq.data().len());
    let out = fq.matmul(&kv)?;
    meter.free(fq.data().len() + kv.data().len());
    finite(out, "kernel attention")
}

/// Left-associated `(φ(Q) φ(K)ᵀ) V`; quadratic, used as a reference.
pub fn kernel_linear_attention_left<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    phi: Activation,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    let sim = phi.apply_matrix(q).matmul_t(&phi.apply_matrix(k))?;
    finite(sim.matmul(v)?, "kernel attention (left)")
}

pub fn softmax_shrinking_attention<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    s: &Matrix<T>,
    phi: Activation,
) -> Result<Matrix<T>> {
    softmax_shrinking_attention_metered(q, k, v, s, phi, &mut AuxMeter::new())
}

fn check_similarity<T: Element>(q: &Matrix<T>, s: &Matrix<T>) -> Result<()> {
    let d = q.cols();
    if s.rows() != d || s.cols() != d {
        return Err(Error::shape(format!(
            "similarity matrix is {}x{}, head dim is {d}",
            s.rows(),
            s.cols()
        )));
    }
    Ok(())
}

/// `φ(Q) ((softmax(S) φ(K)ᵀ) V)`; auxiliary storage peaks at `2nd + d²`
/// (with `d_v = d`), `O(n d²)` work.
pub fn softmax_shrinking_attention_metered<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    s: &Matrix<T>,
    phi: Activation,
    meter: &mut AuxMeter,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    check_similarity(q, s)?;
    let a = softmax_rows(s);
    meter.alloc(a.data().len());
    let fk = phi.apply_matrix(k);
    meter.alloc(fk.data().len());
    // d x n
    let ak = a.matmul_t(&fk)?;
    meter.alloc(ak.data().len());
    meter.free(fk.data().len() + a.data().len());
    drop((fk, a));
    let akv = ak.matmul(v)?;
    meter.alloc(akv.data().len());
    meter.free(ak.data().len());
    drop(ak);
    let fq = phi.apply_matrix(q);
    meter.alloc(fq.data().len());
    let out = fq.matmul(&akv)?;
    meter.free(fq.data().len() + akv.data().len());
    finite(out, "softmax shrinking attention")
}

/// Left-associated `(φ(Q) softmax(S) φ(K)ᵀ) V`; quadratic reference.
pub fn softmax_shrinking_attention_left<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    s: &Matrix<T>,
    phi: Activation,
) -> Result<Matrix<T>> {
    check_qkv(q, k, v)?;
    check_similarity(q, s)?;
    let a = softmax_rows(s);
    let sim = phi
        .apply_matrix(q)
        .matmul(&a)?
        .matmul_t(&phi.apply_matrix(k))?;
    finite(sim.matmul(v)?, "softmax shrinking attention (left)")
}

/// Runs one head of the chosen variant.
pub fn attend<T: Element>(
    variant: AttentionVariant,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    s: Option<&Matrix<T>>,
    phi: Activation,
    meter: &mut AuxMeter,
) -> Result<Matrix<T>> {
    match variant {
        AttentionVariant::Vanilla => vanilla_attention_metered(q, k, v, meter),
        AttentionVariant::Kernel => kernel_linear_attention_metered(q, k, v, phi, meter),
        AttentionVariant::Shrinking => {
            let s =
                s.ok_or_else(|| Error::invalid("shrinking attention needs a similarity matrix"))?;
            softmax_shrinking_attention_metered(q, k, v, s, phi, meter)
        }
    }
}

/// Square projections (applied as `x * W`) and head split.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = f32> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    heads: usize,
}

impl<T: Element> AttentionParams<T> {
    pub fn new(
        w_q: Matrix<T>,
        w_k: Matrix<T>,
        w_v: Matrix<T>,
        w_o: Matrix<T>,
        heads: usize,
    ) -> Result<Self> {
        let c = w_q.rows();
        for m in [&w_q, &w_k, &w_v, &w_o] {
            if m.rows() != c || m.cols() != c {
                return Err(Error::shape(format!(
                    "projection is {}x{}, expected {c}x{c}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.all_finite() {
                return Err(Error::NonFinite("attention projection"));
            }
        }
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "model dim {c} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    pub fn param_count(&self) -> usize {
        4 * self.model_dim() * self.model_dim()
    }
}

fn head_slice<T: Element>(m: &Matrix<T>, head: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(m.rows(), d, |r, c| m.get(r, head * d + c))
}

/// Projects, splits into heads, attends per head, concatenates and projects
/// out. `s` holds one `d x d` similarity matrix per batch item, shared by all
/// heads, and is required for the shrinking variant.
pub fn multi_head_attention<T: Element>(
    x: &SeqTensor<T>,
    ap: &AttentionParams<T>,
    variant: AttentionVariant,
    s: Option<&[Matrix<T>]>,
) -> Result<SeqTensor<T>> {
    let c = ap.model_dim();
    if x.dim() != c {
        return Err(Error::ChannelMismatch {
            expected: c,
            actual: x.dim(),
        });
    }
    if variant == AttentionVariant::Shrinking {
        match s {
            None => {
                return Err(Error::invalid(
                    "shrinking attention needs similarity matrices",
                ))
            }
            Some(s) if s.len() != x.batch() => {
                return Err(Error::shape(format!(
                    "{} similarity matrices for batch of {}",
                    s.len(),
                    x.batch()
                )))
            }
            _ => {}
        }
    }
    let (h, d) = (ap.heads(), ap.head_dim());
    let mut items = Vec::with_capacity(x.batch());
    for b in 0..x.batch() {
        let xb = x.item(b);
        let q = xb.matmul(&ap.w_q)?;
        let k = xb.matmul(&ap.w_k)?;
        let v = xb.matmul(&ap.w_v)?;
        let mut concat = Matrix::zeros(x.len(), c);
        for head in 0..h {
            let out = attend(
                variant,
                &head_slice(&q, head, d),
                &head_slice(&k, head, d),
                &head_slice(&v, head, d),
                s.map(|s| &s[b]),
                DEFAULT_FEATURE_MAP,
                &mut AuxMeter::new(),
            )?;
            for r in 0..x.len() {
                for col in 0..d {
                    concat.set(r, head * d + col, out.get(r, col));
                }
            }
        }
        items.push(concat.matmul(&ap.w_o)?);
    }
    SeqTensor::from_items(items)
}
