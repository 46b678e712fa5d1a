use std::path::Path;
use std::process::{Command, Output};

use estisr::bench::{BenchEntry, BenchReport};
use estisr::format::TensorDir;
use estisr::metrics::ImageBuffer;
use estisr::network::{param_count, NetworkConfig};
use estisr::reparam::{fuse_rirb, FusedConv, RirbParams};

fn estisr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_estisr"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn verify_fusion_exit_codes() {
    let ok = estisr(&[
        "verify-fusion",
        "--seed",
        "7",
        "--tol",
        "1e-4",
        "--tol-f64",
        "1e-10",
    ]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    assert!(stdout(&ok).contains("PASS"));

    let strict = estisr(&["verify-fusion", "--seed", "7", "--tol", "1e-12"]);
    assert_eq!(strict.status.code(), Some(1));

    let bad = estisr(&["verify-fusion", "--trials", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(
        estisr(&["verify-fusion", "--tol", "abc"]).status.code(),
        Some(2)
    );
}

#[test]
fn fuse_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let block = dir.path().join("block");
    let fused_dir = dir.path().join("fused");
    let dumped = estisr(&[
        "verify-fusion",
        "--seed",
        "3",
        "--channels",
        "4",
        "--dump-params",
        p(&block),
    ]);
    assert!(dumped.status.success());

    let out = estisr(&["fuse", "--params", p(&block), "--out", p(&fused_dir)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let loaded = FusedConv::load(&fused_dir).unwrap();
    let params = RirbParams::from_tensor_dir(&TensorDir::load(&block).unwrap()).unwrap();
    assert_eq!(loaded, fuse_rirb(&params).unwrap());
    assert_eq!(loaded.sidecar().in_ch, 4);

    let missing = estisr(&[
        "fuse",
        "--params",
        p(&dir.path().join("nope")),
        "--out",
        p(&fused_dir),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn bench_attn_json_round_trips_and_matches_csv() {
    let common = [
        "bench-attn",
        "--n",
        "32,64",
        "--d",
        "4",
        "--heads",
        "2",
        "--repeats",
        "2",
        "--seed",
        "5",
    ];
    let json = estisr(&[&common[..], &["--json"]].concat());
    assert!(json.status.success());
    let text = stdout(&json);
    let report = BenchReport::from_json(&text).unwrap();
    assert_eq!(
        BenchReport::from_json(&report.to_json().unwrap()).unwrap(),
        report
    );
    assert_eq!(report.entries.len(), 6);
    assert_eq!(report.environment.thread_count, 1);
    assert_eq!(report.environment.seed, 5);

    let csv = estisr(&[&common[..], &["--csv"]].concat());
    assert!(csv.status.success());
    let rows = BenchReport::entries_from_csv(&stdout(&csv)).unwrap();
    let untimed = |e: &BenchEntry| BenchEntry {
        wall_time_ms: 0.0,
        ..e.clone()
    };
    assert_eq!(
        rows.iter().map(untimed).collect::<Vec<_>>(),
        report.entries.iter().map(untimed).collect::<Vec<_>>()
    );

    let threaded = estisr(&[&common[..], &["--threads", "2"]].concat());
    assert_eq!(
        BenchReport::from_json(&stdout(&threaded))
            .unwrap()
            .environment
            .thread_count,
        2
    );
}

#[test]
fn bench_fusion_reports_both_paths() {
    let out = estisr(&[
        "bench-fusion",
        "--shapes",
        "4x8x8,8x8x16x2",
        "--repeats",
        "2",
        "--json",
    ]);
    assert!(out.status.success());
    let report = BenchReport::from_json(&stdout(&out)).unwrap();
    let labels: Vec<_> = report.entries.iter().map(|e| e.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "fused_c4_b1",
            "fused_c8_b2",
            "unfused_c4_b1",
            "unfused_c8_b2"
        ]
    );
    assert!(report
        .entries
        .iter()
        .all(|e| e.max_abs_err <= 1e-4 && e.wall_time_ms > 0.0));
    assert_eq!(
        estisr(&["bench-fusion", "--shapes", "4x8"]).status.code(),
        Some(2)
    );
}

#[test]
fn forward_with_saved_and_reloaded_params() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("lr.png");
    ImageBuffer::from_fn(20, 6, |x, y, c| (x * 9 + y * 31 + c * 50) as u8)
        .unwrap()
        .save_png(&input)
        .unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model_dim": 16, "heads": 2, "decoder_layers": 1, "seed": 4}"#,
    )
    .unwrap();
    let params = dir.path().join("params");
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));

    let first = estisr(&[
        "forward",
        "--input",
        p(&input),
        "--output",
        p(&a),
        "--config",
        p(&cfg),
        "--save-params",
        p(&params),
    ]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let second = estisr(&[
        "forward",
        "--input",
        p(&input),
        "--output",
        p(&b),
        "--config",
        p(&cfg),
        "--params",
        p(&params),
    ]);
    assert!(
        second.status.success(),
        "{}",
        String::from_utf8_lossy(&second.stderr)
    );
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let img = ImageBuffer::load_png(&a).unwrap();
    assert_eq!((img.width(), img.height()), (40, 12));

    let cmp = estisr(&["compare", p(&a), p(&b)]);
    assert!(stdout(&cmp).contains("psnr_db=100.0000"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model_dim": 10, "heads": 3}"#).unwrap();
    assert_eq!(
        estisr(&["param-count", "--config", p(&cfg)]).status.code(),
        Some(2)
    );
    std::fs::write(&cfg, r#"{"modle_dim": 16}"#).unwrap();
    assert_eq!(
        estisr(&["param-count", "--config", p(&cfg)]).status.code(),
        Some(2)
    );
    assert_eq!(estisr(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn param_count_and_info() {
    let out = estisr(&["param-count"]);
    let n: u64 = stdout(&out).trim().parse().unwrap();
    assert_eq!(n, param_count(&NetworkConfig::default()));

    let info: serde_json::Value = serde_json::from_str(&stdout(&estisr(&["info"]))).unwrap();
    assert_eq!(info["name"], "estisr");
    assert_eq!(info["param_count"], n);
    assert_eq!(info["config"]["attention_variant"], "shrinking");
}
