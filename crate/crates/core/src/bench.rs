//! Timing and memory harness for the attention variants and for block fusion.
//!
//! Wall time is the median of `repeats` runs after `warmup` discarded runs.
//! Memory is the analytic peak of auxiliary buffers, taken from the
//! [`AuxMeter`] the attention kernels report into.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionVariant, AuxMeter, DEFAULT_FEATURE_MAP};
use crate::error::{Error, Result};
use crate::init;
use crate::ops::{softmax_rows, Activation};
use crate::reparam::{fuse_rirb, RirbParams};
use crate::tensor::{Element, Matrix, Tensor4};

pub const CSV_HEADER: &str = "label,n,d,heads,wall_time_ms,aux_bytes_peak,max_abs_err";
pub const DEFAULT_REPEATS: usize = 20;
pub const DEFAULT_WARMUP: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub label: String,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub wall_time_ms: f64,
    pub aux_bytes_peak: u64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEnvironment {
    pub thread_count: usize,
    pub dtype: String,
    pub seed: u64,
    pub timestamp: String,
}

impl BenchEnvironment {
    pub fn now(thread_count: usize, seed: u64) -> Self {
        Self {
            thread_count,
            dtype: f32::NAME.to_string(),
            seed,
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
    pub environment: BenchEnvironment,
}

impl BenchReport {
    /// Sorts entries by `(label, n)`.
    pub fn new(mut entries: Vec<BenchEntry>, environment: BenchEnvironment) -> Self {
        entries.sort_by(|a, b| a.label.cmp(&b.label).then(a.n.cmp(&b.n)));
        Self {
            entries,
            environment,
        }
    }

    pub fn find(&self, label: &str, n: usize) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.label == label && e.n == n)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Floats are written with Rust's shortest round-trip formatting, so the
    /// CSV carries exactly the values in the JSON form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.label, e.n, e.d, e.heads, e.wall_time_ms, e.aux_bytes_peak, e.max_abs_err
            );
        }
        out
    }

    pub fn entries_from_csv(s: &str) -> Result<Vec<BenchEntry>> {
        let mut lines = s.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::invalid("csv header mismatch"));
        }
        let bad = |line: &str| Error::invalid(format!("malformed csv row `{line}`"));
        lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(bad(line));
                }
                Ok(BenchEntry {
                    label: f[0].to_string(),
                    n: f[1].parse().map_err(|_| bad(line))?,
                    d: f[2].parse().map_err(|_| bad(line))?,
                    heads: f[3].parse().map_err(|_| bad(line))?,
                    wall_time_ms: f[4].parse().map_err(|_| bad(line))?,
                    aux_bytes_peak: f[5].parse().map_err(|_| bad(line))?,
                    max_abs_err: f[6].parse().map_err(|_| bad(line))?,
                })
            })
            .collect()
    }
}

/// Median wall time in milliseconds, never exactly zero.
pub fn median_time_ms(
    warmup: usize,
    repeats: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::invalid("need at least one timed repeat"));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    Ok(median.max(1e-9))
}

fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Inputs for one head: `Q, K ~ N(0,1)`, `V ~ N(0,1)/n`.
///
/// The linear variants sum over all `n` keys without normalization, so the
/// `1/n` on values keeps outputs O(1) and absolute errors comparable across
/// `n`.
#[derive(Clone, Debug)]
pub struct HeadOperands {
    pub q: Matrix<f32>,
    pub k: Matrix<f32>,
    pub v: Matrix<f32>,
}

impl HeadOperands {
    pub fn random(rng: &mut init::SeededRng, n: usize, d: usize) -> Self {
        let q = init::standard_normal_matrix(rng, n, d);
        let k = init::standard_normal_matrix(rng, n, d);
        let inv = 1.0 / n.max(1) as f32;
        let v = init::standard_normal_matrix::<f32>(rng, n, d).map(|x| x * inv);
        Self { q, k, v }
    }
}

/// Quadratic-time, linear-memory reference in f64: each output row is built
/// from its own row of similarities.
pub fn streaming_reference(
    variant: AttentionVariant,
    q: &Matrix<f32>,
    k: &Matrix<f32>,
    v: &Matrix<f32>,
    s: Option<&Matrix<f32>>,
    phi: Activation,
) -> Matrix<f64> {
    let (n, d, dv) = (q.rows(), q.cols(), v.cols());
    let q = q.cast::<f64>();
    let k = k.cast::<f64>();
    let v = v.cast::<f64>();
    let mut out = Matrix::zeros(n, dv);
    let mut w = vec![0.0f64; k.rows()];
    // query-side transform applied to each row before dotting with keys
    let (fq, fk, mix): (Matrix<f64>, Matrix<f64>, Option<Matrix<f64>>) = match variant {
        AttentionVariant::Vanilla => (q.clone(), k.clone(), None),
        AttentionVariant::Kernel => (phi.apply_matrix(&q), phi.apply_matrix(&k), None),
        AttentionVariant::Shrinking => (
            phi.apply_matrix(&q),
            phi.apply_matrix(&k),
            Some(softmax_rows(
                &s.expect("shrinking reference needs S").cast::<f64>(),
            )),
        ),
    };
    let mut qrow = vec![0.0f64; d];
    for i in 0..n {
        for (c, slot) in qrow.iter_mut().enumerate() {
            *slot = match &mix {
                Some(a) => (0..d).map(|r| fq.get(i, r) * a.get(r, c)).sum(),
                None => fq.get(i, c),
            };
        }
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = (0..d).map(|c| qrow[c] * fk.get(j, c)).sum();
        }
        if variant == AttentionVariant::Vanilla {
            let scale = 1.0 / (d as f64).sqrt();
            let m = w.iter().map(|x| x * scale).fold(f64::MIN, f64::max);
            let mut z = 0.0;
            for wj in w.iter_mut() {
                *wj = (*wj * scale - m).exp();
                z += *wj;
            }
            w.iter_mut().for_each(|wj| *wj /= z);
        }
        for c in 0..dv {
            out.set(i, c, (0..k.rows()).map(|j| w[j] * v.get(j, c)).sum());
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct AttnBenchOptions {
    pub n_list: Vec<usize>,
    /// Per-head width.
    pub d: usize,
    pub heads: usize,
    pub variants: Vec<AttentionVariant>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub threads: usize,
    /// Skip the quadratic reference above this length (error reported as 0).
    pub max_reference_n: usize,
}

impl Default for AttnBenchOptions {
    fn default() -> Self {
        Self {
            n_list: vec![256, 512, 1024, 2048, 4096],
            d: 8,
            heads: 8,
            variants: AttentionVariant::ALL.to_vec(),
            repeats: DEFAULT_REPEATS,
            warmup: DEFAULT_WARMUP,
            seed: 0,
            threads: 1,
            max_reference_n: usize::MAX,
        }
    }
}

fn run_heads(
    pool: Option<&rayon::ThreadPool>,
    variant: AttentionVariant,
    heads: &[HeadOperands],
    s: &Matrix<f32>,
) -> Result<(Vec<Matrix<f32>>, usize)> {
    let one = |h: &HeadOperands| -> Result<(Matrix<f32>, usize)> {
        let mut meter = AuxMeter::new();
        let out = attend(
            variant,
            &h.q,
            &h.k,
            &h.v,
            Some(s),
            DEFAULT_FEATURE_MAP,
            &mut meter,
        )?;
        Ok((out, meter.peak()))
    };
    let results: Vec<(Matrix<f32>, usize)> = match pool {
        None => heads.iter().map(one).collect::<Result<_>>()?,
        Some(pool) => {
            use rayon::prelude::*;
            pool.install(|| heads.par_iter().map(one).collect::<Result<_>>())?
        }
    };
    let peak = results.iter().map(|r| r.1).max().unwrap_or(0);
    Ok((results.into_iter().map(|r| r.0).collect(), peak))
}

/// Times every `(variant, n)` pair over `heads` independent heads of width `d`.
pub fn bench_attention(opts: &AttnBenchOptions) -> Result<BenchReport> {
    if opts.n_list.is_empty() || opts.variants.is_empty() {
        return Err(Error::invalid("attention bench needs lengths and variants"));
    }
    if opts.d == 0 || opts.heads == 0 {
        return Err(Error::invalid("head width and count must be positive"));
    }
    let pool = thread_pool(opts.threads)?;
    let concurrency = opts.threads.clamp(1, opts.heads);
    let mut entries = Vec::new();
    for &n in &opts.n_list {
        let mut rng = init::seeded(opts.seed ^ (n as u64).rotate_left(17));
        let heads: Vec<HeadOperands> = (0..opts.heads)
            .map(|_| HeadOperands::random(&mut rng, n, opts.d))
            .collect();
        let s = init::standard_normal_matrix::<f32>(&mut rng, opts.d, opts.d);
        for &variant in &opts.variants {
            let (outs, peak) = run_heads(pool.as_ref(), variant, &heads, &s)?;
            let max_abs_err = if n <= opts.max_reference_n {
                let reference = streaming_reference(
                    variant,
                    &heads[0].q,
                    &heads[0].k,
                    &heads[0].v,
                    Some(&s),
                    DEFAULT_FEATURE_MAP,
                );
                outs[0].cast::<f64>().max_abs_diff(&reference)
            } else {
                0.0
            };
            let wall = median_time_ms(opts.warmup, opts.repeats, || {
                run_heads(pool.as_ref(), variant, &heads, &s).map(|_| ())
            })?;
            entries.push(BenchEntry {
                label: variant.name().to_string(),
                n,
                d: opts.d,
                heads: opts.heads,
                wall_time_ms: wall,
                aux_bytes_peak: (peak * concurrency * std::mem::size_of::<f32>()) as u64,
                max_abs_err,
            });
        }
    }
    Ok(BenchReport::new(
        entries,
        BenchEnvironment::now(opts.threads.max(1), opts.seed),
    ))
}

/// Heap bytes allocated above baseline while one head runs, as seen by
/// [`crate::alloc::CountingAlloc`]. `None` unless that allocator is installed.
/// Includes the output matrix.
pub fn measured_head_heap(
    variant: AttentionVariant,
    n: usize,
    d: usize,
    seed: u64,
) -> Result<Option<usize>> {
    let mut rng = init::seeded(seed);
    let h = HeadOperands::random(&mut rng, n, d);
    let s = init::standard_normal_matrix::<f32>(&mut rng, d, d);
    let (out, bytes) = crate::alloc::measure_peak(|| {
        attend(
            variant,
            &h.q,
            &h.k,
            &h.v,
            Some(&s),
            DEFAULT_FEATURE_MAP,
            &mut AuxMeter::new(),
        )
    });
    out?;
    Ok(bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
}

impl FusionShape {
    pub fn label_suffix(&self) -> String {
        format!("c{}_b{}", self.channels, self.batch)
    }
}

#[derive(Clone, Debug)]
pub struct FusionBenchOptions {
    pub shapes: Vec<FusionShape>,
    pub expand_ratio: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for FusionBenchOptions {
    fn default() -> Self {
        let shape = |channels, height, width| FusionShape {
            channels,
            height,
            width,
            batch: 1,
        };
        Self {
            shapes: vec![
                shape(16, 16, 64),
                shape(32, 16, 64),
                shape(64, 16, 64),
                shape(64, 32, 128),
            ],
            expand_ratio: 2,
            repeats: DEFAULT_REPEATS,
            warmup: DEFAULT_WARMUP,
            seed: 0,
        }
    }
}

/// Fused vs unfused block timings on seeded random blocks and inputs.
///
/// Entries are labelled `fused_c{C}_b{B}` / `unfused_c{C}_b{B}` with `n = H*W`
/// and `d = C`. The fused entry's error is measured against the unfused
/// forward; the unfused entry is its own reference.
pub fn bench_fusion(opts: &FusionBenchOptions) -> Result<BenchReport> {
    if opts.shapes.is_empty() {
        return Err(Error::invalid("fusion bench needs at least one shape"));
    }
    let f32_bytes = std::mem::size_of::<f32>() as u64;
    let mut entries = Vec::new();
    for (i, shape) in opts.shapes.iter().enumerate() {
        let mut rng = init::seeded(opts.seed.wrapping_add(i as u64));
        let c = shape.channels;
        let p = RirbParams::<f32>::random(&mut rng, c, opts.expand_ratio, c, true, 0.1)?;
        let fused = fuse_rirb(&p)?;
        let x: Tensor4<f32> =
            init::standard_normal_tensor(&mut rng, [shape.batch, c, shape.height, shape.width]);
        let err = fused.forward(&x)?.max_abs_diff(&p.forward_unfused(&x)?);
        let unfused_ms = median_time_ms(opts.warmup, opts.repeats, || {
            p.forward_unfused(&x).map(|_| ())
        })?;
        let fused_ms = median_time_ms(opts.warmup, opts.repeats, || fused.forward(&x).map(|_| ()))?;

        let plane = (shape.batch * shape.height * shape.width) as u64;
        let mid = (c * opts.expand_ratio) as u64;
        // two intermediate maps plus the spatial conv's patch matrix
        let unfused_aux = (2 * mid * plane + 9 * mid * plane / shape.batch as u64) * f32_bytes;
        let fused_aux = 9 * c as u64 * plane / shape.batch as u64 * f32_bytes;
        let n = shape.height * shape.width;
        let suffix = shape.label_suffix();
        entries.push(BenchEntry {
            label: format!("fused_{suffix}"),
            n,
            d: c,
            heads: 0,
            wall_time_ms: fused_ms,
            aux_bytes_peak: fused_aux,
            max_abs_err: err,
        });
        entries.push(BenchEntry {
            label: format!("unfused_{suffix}"),
            n,
            d: c,
            heads: 0,
            wall_time_ms: unfused_ms,
            aux_bytes_peak: unfused_aux,
            max_abs_err: 0.0,
        });
    }
    Ok(BenchReport::new(
        entries,
        BenchEnvironment::now(1, opts.seed),
    ))
}
