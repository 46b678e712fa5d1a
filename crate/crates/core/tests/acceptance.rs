//! Acceptance suite. Runs each criterion in sequence (timing criteria must not
//! share the machine with other tests) and prints one PASS/FAIL line apiece.
//! Exits nonzero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, Stdio};
use std::time::Instant;

use estisr::alloc::{self, CountingAlloc};
use estisr::attention::{
    corrupt_sequence, kernel_linear_attention, kernel_linear_attention_left, multi_head_attention,
    softmax_shrinking_attention, softmax_shrinking_attention_left, AttentionParams,
    AttentionVariant, CorruptionSpec, DEFAULT_FEATURE_MAP,
};
use estisr::bench::{self, AttnBenchOptions, FusionBenchOptions, FusionShape, HeadOperands};
use estisr::metrics::{psnr, ssim, ImageBuffer, PSNR_CAP_DB};
use estisr::network::{estisr_forward, init_params, NetworkConfig};
use estisr::ops::{conv2d, conv2d_direct, softmax_rows, Activation};
use estisr::reparam::{fuse_rirb, RirbParams};
use estisr::{init, Matrix, SeqTensor, Tensor4};
use rand::Rng;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// 1 ------------------------------------------------------------------------

fn fusion_equivalence() -> Outcome {
    let t = Instant::now();
    let (mut worst32, mut worst64, mut configs) = (0.0f64, 0.0f64, 0);
    for &c in &[1usize, 3, 8, 16] {
        for &skip in &[true, false] {
            for rep in 0..7u64 {
                let seed = 1000 * c as u64 + 100 * skip as u64 + rep;
                let mut rng = init::seeded(seed);
                let p = RirbParams::<f32>::random(&mut rng, c, 2, c, skip, 0.5).unwrap();
                let x: Tensor4<f32> = init::standard_normal_tensor(&mut rng, [4, c, 8, 16]);

                let fused = fuse_rirb(&p).unwrap();
                worst32 = worst32.max(
                    fused
                        .forward(&x)
                        .unwrap()
                        .max_abs_diff(&p.forward_unfused(&x).unwrap()),
                );

                let p64 = p.cast::<f64>();
                let x64 = x.cast::<f64>();
                let fused64 = fuse_rirb(&p64).unwrap();
                worst64 = worst64.max(
                    fused64
                        .forward(&x64)
                        .unwrap()
                        .max_abs_diff(&p64.forward_unfused(&x64).unwrap()),
                );
                configs += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        configs >= 50 && worst32 <= 1e-4 && worst64 <= 1e-10 && secs < 30.0,
        format!(
            "fusion equivalence: {configs} configs, f32 max {worst32:.2e} (<= 1e-4), f64 max {worst64:.2e} (<= 1e-10), {secs:.2} s (< 30 s)"
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn fusion_speed() -> Outcome {
    let shape = |channels, height, width| FusionShape {
        channels,
        height,
        width,
        batch: 1,
    };
    let opts = FusionBenchOptions {
        shapes: vec![
            shape(8, 16, 64),
            shape(16, 16, 64),
            shape(32, 16, 64),
            shape(64, 16, 64),
            shape(64, 32, 128),
        ],
        repeats: 15,
        seed: 2,
        ..Default::default()
    };
    let report = bench::bench_fusion(&opts).unwrap();
    let mut all_faster = true;
    let mut ratios = Vec::new();
    let mut big_ratio = f64::INFINITY;
    let mut max_err = 0.0f64;
    for s in &opts.shapes {
        let n = s.height * s.width;
        let suffix = s.label_suffix();
        let fused = report.find(&format!("fused_{suffix}"), n).unwrap();
        let unfused = report.find(&format!("unfused_{suffix}"), n).unwrap();
        let r = fused.wall_time_ms / unfused.wall_time_ms;
        all_faster &= r <= 1.0;
        max_err = max_err.max(fused.max_abs_err);
        ratios.push(format!("C{} {}x{} {:.2}", s.channels, s.height, s.width, r));
        if s.channels == 64 && s.height == 32 && s.width == 128 {
            big_ratio = r;
        }
    }
    outcome(
        all_faster && big_ratio <= 0.8 && max_err <= 1e-4,
        format!(
            "fusion speed: fused/unfused median [{}], C64 32x128 {:.2} (<= 0.8), max err {:.2e}",
            ratios.join(", "),
            big_ratio,
            max_err
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn associativity() -> Outcome {
    let phi = DEFAULT_FEATURE_MAP;
    let (mut worst_kernel, mut worst_shrink, mut worst_rel_unscaled) = (0.0f64, 0.0f64, 0.0f64);
    for &n in &[16usize, 256, 1024] {
        for &d in &[4usize, 8, 32] {
            let mut rng = init::seeded((n * 100 + d) as u64);
            let h = HeadOperands::random(&mut rng, n, d);
            let s = init::standard_normal_matrix::<f32>(&mut rng, d, d);
            let right = kernel_linear_attention(&h.q, &h.k, &h.v, phi).unwrap();
            let left = kernel_linear_attention_left(&h.q, &h.k, &h.v, phi).unwrap();
            worst_kernel = worst_kernel.max(right.max_abs_diff(&left));
            let right = softmax_shrinking_attention(&h.q, &h.k, &h.v, &s, phi).unwrap();
            let left = softmax_shrinking_attention_left(&h.q, &h.k, &h.v, &s, phi).unwrap();
            worst_shrink = worst_shrink.max(right.max_abs_diff(&left));

            // same operands with unscaled values: relative agreement only
            let v = h.v.map(|x| x * n as f32);
            let right = softmax_shrinking_attention(&h.q, &h.k, &v, &s, phi).unwrap();
            let left = softmax_shrinking_attention_left(&h.q, &h.k, &v, &s, phi).unwrap();
            let scale = left
                .data()
                .iter()
                .fold(0.0f64, |m, x| m.max(f64::from(x.abs())));
            worst_rel_unscaled = worst_rel_unscaled.max(right.max_abs_diff(&left) / scale);
        }
    }
    outcome(
        worst_kernel <= 1e-5 && worst_shrink <= 1e-5,
        format!(
            "associativity (V ~ N(0,1)/n): kernel {worst_kernel:.2e}, shrinking {worst_shrink:.2e} (<= 1e-5); \
             unscaled V relative {worst_rel_unscaled:.1e}"
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn complexity_scaling() -> Outcome {
    let t = Instant::now();
    let (d, heads) = (8usize, 8usize);
    let opts = AttnBenchOptions {
        n_list: vec![512, 1024, 2048, 4096],
        d,
        heads,
        repeats: 21,
        warmup: 3,
        seed: 4,
        threads: 1,
        max_reference_n: 1024,
        ..Default::default()
    };
    let report = bench::bench_attention(&opts).unwrap();
    let ratio = |label: &str| {
        report.find(label, 4096).unwrap().wall_time_ms
            / report.find(label, 512).unwrap().wall_time_ms
    };
    let (r_shrink, r_kernel, r_vanilla) = (ratio("shrinking"), ratio("kernel"), ratio("vanilla"));

    let mut mem_ok = true;
    let mut heap_ok = true;
    let mut heap_notes = Vec::new();
    for e in &report.entries {
        let floats = e.aux_bytes_peak / 4;
        let (n, dd) = (e.n as u64, d as u64);
        let bound = 4 * (n * dd + dd * dd);
        match e.label.as_str() {
            "vanilla" => mem_ok &= floats >= n * n,
            "shrinking" => mem_ok &= floats <= bound,
            _ => {}
        }
        mem_ok &= e.max_abs_err <= 1e-5;
        // allocator view of one head, output included
        let variant: AttentionVariant = e.label.parse().unwrap();
        if let Some(bytes) = bench::measured_head_heap(variant, e.n, d, 4).unwrap() {
            let heap_floats = bytes as u64 / 4;
            match variant {
                AttentionVariant::Vanilla => heap_ok &= heap_floats >= n * n,
                AttentionVariant::Shrinking => heap_ok &= heap_floats <= bound,
                AttentionVariant::Kernel => {}
            }
            if e.n == 4096 {
                heap_notes.push(format!("{} {}", e.label, heap_floats));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let measured = if alloc::is_active() {
        heap_notes.join(", ")
    } else {
        "n/a".into()
    };
    outcome(
        r_shrink <= 12.0 && r_kernel <= 12.0 && r_vanilla >= 32.0 && mem_ok && heap_ok && secs < 120.0,
        format!(
            "complexity scaling: wall(4096)/wall(512) shrinking {r_shrink:.1}, kernel {r_kernel:.1} (<= 12), \
             vanilla {r_vanilla:.1} (>= 32); analytic aux bounds {}; heap floats at n=4096 [{measured}]; {secs:.1} s (< 120 s)",
            if mem_ok { "hold" } else { "VIOLATED" }
        ),
    )
}

// 5 ------------------------------------------------------------------------

/// Projections, per-head softmax attention and output projection by loops, in f64.
fn mha_oracle(x: &SeqTensor<f32>, ap: &AttentionParams<f32>) -> Vec<f64> {
    let (nb, n, c) = (x.batch(), x.len(), x.dim());
    let (h, d) = (ap.heads(), ap.head_dim());
    let w = |m: &Matrix<f32>, i: usize, j: usize| f64::from(m.get(i, j));
    let mut out = vec![0.0f64; nb * n * c];
    for b in 0..nb {
        let xb = x.item(b);
        let proj = |wm: &Matrix<f32>| -> Vec<Vec<f64>> {
            (0..n)
                .map(|t| {
                    (0..c)
                        .map(|j| (0..c).map(|i| f64::from(xb.get(t, i)) * w(wm, i, j)).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(&ap.w_q), proj(&ap.w_k), proj(&ap.w_v));
        let mut concat = vec![vec![0.0f64; c]; n];
        for head in 0..h {
            let off = head * d;
            for i in 0..n {
                let mut scores = vec![0.0f64; n];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for e in 0..d {
                        dot += q[i][off + e] * k[j][off + e];
                    }
                    *s = dot / (d as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..n {
                    let a = (scores[j] - m).exp() / z;
                    for e in 0..d {
                        concat[i][off + e] += a * v[j][off + e];
                    }
                }
            }
        }
        for t in 0..n {
            for j in 0..c {
                out[(b * n + t) * c + j] = (0..c).map(|i| concat[t][i] * w(&ap.w_o, i, j)).sum();
            }
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut worst_mha = 0.0f64;
    let mut mha_cases = 0;
    let mut rng = init::seeded(5);
    for &n in &[1usize, 2, 7, 16, 32] {
        for &(c, h) in &[(8usize, 1usize), (8, 2), (16, 4), (12, 3)] {
            let ap = AttentionParams::new(
                init::he_matrix(&mut rng, c, c),
                init::he_matrix(&mut rng, c, c),
                init::he_matrix(&mut rng, c, c),
                init::he_matrix(&mut rng, c, c),
                h,
            )
            .unwrap();
            let data = init::standard_normal_vec(&mut rng, 2 * n * c);
            let x = SeqTensor::new(2, n, c, data).unwrap();
            let got = multi_head_attention(&x, &ap, AttentionVariant::Vanilla, None).unwrap();
            let want = mha_oracle(&x, &ap);
            for (g, w) in got.data().iter().zip(&want) {
                worst_mha = worst_mha.max((f64::from(*g) - w).abs());
            }
            mha_cases += 1;
        }
    }

    let mut worst_conv = 0.0f64;
    for case in 0..100u64 {
        let mut rng = init::seeded(10_000 + case);
        let ksize = if rng.gen_bool(0.5) { 3 } else { 1 };
        let (cin, cout) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let dims = [
            rng.gen_range(1..=3),
            cin,
            rng.gen_range(1..=12),
            rng.gen_range(1..=12),
        ];
        let k = init::he_conv_with_bias::<f32>(&mut rng, cout, cin, ksize, 0.5).unwrap();
        let x: Tensor4<f32> = init::standard_normal_tensor(&mut rng, dims);
        worst_conv = worst_conv.max(
            conv2d(&x, &k)
                .unwrap()
                .max_abs_diff(&conv2d_direct(&x, &k).unwrap()),
        );
    }
    outcome(
        worst_mha <= 1e-5 && worst_conv <= 1e-5,
        format!(
            "oracle equivalence: vanilla MHA {mha_cases} cases n <= 32 max {worst_mha:.2e}, conv2d 100 cases max {worst_conv:.2e} (<= 1e-5)"
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn end_to_end() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    // CLI: PNG in, PNG out, twice
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("lr.png");
    ImageBuffer::from_fn(64, 16, |x, y, c| ((x * 5 + y * 11 + c * 70) % 256) as u8)
        .unwrap()
        .save_png(&input)
        .unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("sr{run}.png"));
        let status = Command::new(env!("CARGO_BIN_EXE_estisr"))
            .args(["forward", "--input"])
            .arg(&input)
            .arg("--output")
            .arg(&out)
            .stdout(Stdio::null())
            .status()
            .unwrap();
        ok &= status.success();
        outputs.push(std::fs::read(&out).unwrap_or_default());
    }
    let sr = ImageBuffer::load_png(&dir.path().join("sr0.png"));
    let dims = sr
        .as_ref()
        .map(|i| (i.width(), i.height()))
        .unwrap_or((0, 0));
    ok &= dims == (128, 32);
    let identical = !outputs[0].is_empty() && outputs[0] == outputs[1];
    ok &= identical;
    notes.push(format!(
        "cli 64x16 -> {}x{}, repeat byte-identical {identical}",
        dims.0, dims.1
    ));

    // library: fused vs unfused networks
    let mut rng = init::seeded(6);
    let lr: Tensor4<f32> =
        init::standard_normal_tensor::<f32>(&mut rng, [1, 3, 16, 64]).map(|v| 0.5 + 0.2 * v);
    let configs = [
        ("shrinking", NetworkConfig::default()),
        (
            "vanilla",
            NetworkConfig {
                attention_variant: AttentionVariant::Vanilla,
                ..Default::default()
            },
        ),
        (
            "no-decoder",
            NetworkConfig {
                decoder_layers: 0,
                ..Default::default()
            },
        ),
    ];
    for (name, cfg) in configs {
        let unfused = init_params::<f32>(&cfg).unwrap();
        let fused = unfused.fused().unwrap();
        let a = estisr_forward(&unfused, &cfg, &lr, None).unwrap();
        let a2 = estisr_forward(&unfused, &cfg, &lr, None).unwrap();
        let b = estisr_forward(&fused, &cfg, &lr, None).unwrap();
        let diff = a.max_abs_diff(&b);
        let interior =
            a.data().iter().filter(|&&v| v > 0.0 && v < 1.0).count() as f64 / a.data().len() as f64;
        ok &= a.dims() == [1, 3, 32, 128] && a.data() == a2.data() && diff <= 1e-4;
        notes.push(format!(
            "{name} diff {diff:.1e} ({:.0}% unclamped)",
            100.0 * interior
        ));
    }

    // Reported, not gated: this network's pre-clamp activations reach ~1e5,
    // where one f32 ulp exceeds the tolerance, so any pixel that lands on
    // the clamp boundary shows reordering noise. f64 shows the fold itself.
    let cfg = NetworkConfig {
        attention_variant: AttentionVariant::Kernel,
        ..Default::default()
    };
    let unfused = init_params::<f32>(&cfg).unwrap();
    let d32 = estisr_forward(&unfused, &cfg, &lr, None)
        .unwrap()
        .max_abs_diff(&estisr_forward(&unfused.fused().unwrap(), &cfg, &lr, None).unwrap());
    let unfused = init_params::<f64>(&cfg).unwrap();
    let lr64 = lr.cast::<f64>();
    let d64 = estisr_forward(&unfused, &cfg, &lr64, None)
        .unwrap()
        .max_abs_diff(&estisr_forward(&unfused.fused().unwrap(), &cfg, &lr64, None).unwrap());
    notes.push(format!(
        "[ungated] kernel-variant network diff f32 {d32:.1e}, f64 {d64:.1e}"
    ));
    outcome(ok, format!("end-to-end: {}", notes.join("; ")))
}

// 7 ------------------------------------------------------------------------

fn corruption_statistics() -> Outcome {
    let (l, draws, p) = (100usize, 10_000u64, 0.5);
    let dim = 4;
    let data: Vec<f32> = (0..l * dim).map(|i| -1.0 - i as f32).collect();
    let x = SeqTensor::new(1, l, dim, data).unwrap();
    let mut total = 0.0f64;
    let mut identity_ok = true;
    for seed in 0..draws {
        let c = corrupt_sequence(&x, &CorruptionSpec::new(p, seed).unwrap()).unwrap();
        let n = c.counts[0];
        let untouched = (0..l)
            .filter(|&t| {
                c.seq
                    .token(0, t)
                    .iter()
                    .zip(x.token(0, t))
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            })
            .count();
        identity_ok &= untouched == l - n;
        total += n as f64 / l as f64;
    }
    let mean = total / draws as f64;
    let lo = (p * l as f64).ceil() as usize;
    let expected = (lo..=l).map(|k| k as f64 / l as f64).sum::<f64>() / (l - lo + 1) as f64;
    outcome(
        (mean - expected).abs() <= 0.01 && identity_ok,
        format!(
            "corruption statistics: mean fraction {mean:.4} vs closed form {expected:.4} (+-0.01), \
             l-n untouched positions bit-identical in every draw: {identity_ok}"
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn metrics_utility() -> Outcome {
    let mut rng = init::seeded(8);
    let pixels: Vec<u8> = (0..64 * 16 * 3).map(|_| rng.gen_range(0..=254)).collect();
    let a = ImageBuffer::new(64, 16, pixels.clone()).unwrap();
    let b = ImageBuffer::new(64, 16, pixels.iter().map(|v| v + 1).collect()).unwrap();
    let same_psnr = psnr(&a, &a).unwrap();
    let same_ssim = ssim(&a, &a).unwrap();
    let off_psnr = psnr(&a, &b).unwrap();
    outcome(
        same_psnr == PSNR_CAP_DB && (same_ssim - 1.0).abs() <= 1e-9 && (off_psnr - 48.13).abs() <= 0.01,
        format!("metrics: identical PSNR {same_psnr} dB SSIM {same_ssim:.12}, +1 offset PSNR {off_psnr:.4} dB"),
    )
}

// 9 ------------------------------------------------------------------------

fn softmax_and_feature_map() -> Outcome {
    let mut rng = init::seeded(9);
    let (rows, cols) = (10_000, 100);
    let logits = Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-50.0f32..50.0))
            .collect(),
    )
    .unwrap();
    let sm = softmax_rows(&logits);
    let worst_sum = (0..rows)
        .map(|r| (sm.row(r).iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let phi = Activation::EluPlusOne;
    let inputs: Vec<f32> = (0..1_000_000)
        .map(|_| rng.gen_range(-200.0f32..200.0))
        .collect();
    let nonpositive = inputs.iter().filter(|&&v| phi.apply(v) <= 0.0).count();
    outcome(
        worst_sum <= 1e-6 && nonpositive == 0,
        format!(
            "softmax/feature map: worst row-sum error {worst_sum:.1e} (<= 1e-6) over {rows} rows, \
             ELU+1 non-positive outputs {nonpositive} of 1e6"
        ),
    )
}

fn main() {
    let criteria: [(u32, fn() -> Outcome); 9] = [
        (1, fusion_equivalence),
        (2, fusion_speed),
        (3, associativity),
        (4, complexity_scaling),
        (5, oracle_equivalence),
        (6, end_to_end),
        (7, corruption_statistics),
        (8, metrics_utility),
        (9, softmax_and_feature_map),
    ];
    let mut failed = 0;
    for (id, f) in criteria {
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "acceptance {id}: {} {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
