use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use estisr::alloc::CountingAlloc;
use estisr::attention::AttentionVariant;
use estisr::bench::{self, AttnBenchOptions, BenchReport, FusionBenchOptions, FusionShape};
use estisr::format::TensorDir;
use estisr::metrics::{self, ImageBuffer};
use estisr::network::{self, NetworkConfig, NetworkParams};
use estisr::reparam::{fuse_rirb, verify_fusion, RirbParams};
use estisr::{init, Error};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(
    name = "estisr",
    version,
    about = "Efficient scene-text super-resolution kernels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fold a saved residual block into one 3x3 convolution.
    Fuse {
        /// Directory holding expand/spatial/project tensors and a manifest.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare fused and unfused block outputs on random inputs.
    VerifyFusion(VerifyArgs),
    /// Time the attention variants over a range of sequence lengths.
    BenchAttn(BenchAttnArgs),
    /// Time fused against unfused residual blocks.
    BenchFusion(BenchFusionArgs),
    /// Super-resolve one PNG.
    Forward {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Network config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Saved network parameters; seeded random weights when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Also write the parameters used to this directory.
        #[arg(long)]
        save_params: Option<PathBuf>,
    },
    /// Print the closed-form parameter count for a config.
    ParamCount {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print build and config metadata as JSON.
    Info {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// PSNR and SSIM between two PNGs of equal size.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Block to verify; random parameters are drawn when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 2)]
    ratio: usize,
    #[arg(long)]
    no_skip: bool,
    #[arg(long, default_value_t = 4)]
    trials: usize,
    /// Also check the f64 path against this tolerance.
    #[arg(long)]
    tol_f64: Option<f64>,
    /// Write the random block that was verified.
    #[arg(long)]
    dump_params: Option<PathBuf>,
}

#[derive(Args)]
struct Output {
    /// Emit JSON (the default).
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    #[arg(long)]
    csv: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchAttnArgs {
    #[arg(long = "n", value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048, 4096])]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, value_delimiter = ',', default_values_t = AttentionVariant::ALL.to_vec())]
    variants: Vec<AttentionVariant>,
    #[arg(long, default_value_t = bench::DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Skip the quadratic reference above this length.
    #[arg(long, default_value_t = 4096)]
    max_reference_n: usize,
    /// Print allocator-measured heap peaks for one head to stderr.
    #[arg(long)]
    heap: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct BenchFusionArgs {
    /// Shapes as `CxHxW` or `CxHxWxB`.
    #[arg(long, value_delimiter = ',', default_values_t = ["16x16x64".to_string(), "32x16x64".into(), "64x16x64".into(), "64x32x128".into()])]
    shapes: Vec<String>,
    #[arg(long, default_value_t = 2)]
    ratio: usize,
    #[arg(long, default_value_t = bench::DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Recorded in the report; fusion timing is always single-threaded.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    output: Output,
}

enum Failure {
    Tolerance(String),
    Input(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_config(path: Option<&Path>) -> estisr::Result<NetworkConfig> {
    match path {
        Some(p) => NetworkConfig::from_json(&fs::read(p)?),
        None => Ok(NetworkConfig::default()),
    }
}

fn emit(report: &BenchReport, out: &Output) -> estisr::Result<()> {
    let text = if out.csv {
        report.to_csv()
    } else {
        report.to_json()? + "\n"
    };
    match &out.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_shape(s: &str) -> estisr::Result<FusionShape> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad shape `{s}`")))?;
    match parts[..] {
        [channels, height, width] => Ok(FusionShape {
            channels,
            height,
            width,
            batch: 1,
        }),
        [channels, height, width, batch] => Ok(FusionShape {
            channels,
            height,
            width,
            batch,
        }),
        _ => Err(Error::InvalidArgument(format!(
            "shape `{s}` is not CxHxW[xB]"
        ))),
    }
}

fn cmd_fuse(params: &Path, out: &Path) -> CmdResult {
    let p = RirbParams::from_tensor_dir(&TensorDir::load(params)?)?;
    let fused = fuse_rirb(&p)?;
    fused.save(out)?;
    let side = fused.sidecar();
    println!(
        "fused {}->{} block into {}x{} kernel at {}",
        side.in_ch,
        side.out_ch,
        side.ksize,
        side.ksize,
        out.display()
    );
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> CmdResult {
    let p = match &a.params {
        Some(dir) => RirbParams::from_tensor_dir(&TensorDir::load(dir)?)?,
        None => {
            let mut rng = init::seeded(a.seed);
            RirbParams::random(&mut rng, a.channels, a.ratio, a.channels, !a.no_skip, 0.1)?
        }
    };
    if let Some(dir) = &a.dump_params {
        p.to_tensor_dir().save(dir)?;
    }
    let r32 = verify_fusion(&p, a.trials, a.tol, a.seed)?;
    println!(
        "f32 max_abs_err={:.3e} max_rel_err={:.3e} tol={:.1e}",
        r32.max_abs_err, r32.max_rel_err, a.tol
    );
    let mut ok = r32.pass;
    if let Some(tol) = a.tol_f64 {
        let r64 = verify_fusion(&p.cast::<f64>(), a.trials, tol, a.seed)?;
        println!(
            "f64 max_abs_err={:.3e} max_rel_err={:.3e} tol={:.1e}",
            r64.max_abs_err, r64.max_rel_err, tol
        );
        ok &= r64.pass;
    }
    if ok {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Tolerance("fused output outside tolerance".into()))
    }
}

fn cmd_bench_attn(a: &BenchAttnArgs) -> CmdResult {
    let opts = AttnBenchOptions {
        n_list: a.n_list.clone(),
        d: a.d,
        heads: a.heads,
        variants: a.variants.clone(),
        repeats: a.repeats,
        warmup: a.warmup,
        seed: a.seed,
        threads: a.threads,
        max_reference_n: a.max_reference_n,
    };
    let report = bench::bench_attention(&opts)?;
    if a.heap {
        for e in &report.entries {
            let variant: AttentionVariant = e.label.parse()?;
            if let Some(bytes) = bench::measured_head_heap(variant, e.n, e.d, a.seed)? {
                eprintln!(
                    "{} n={} heap_peak_bytes={} analytic_per_head={}",
                    e.label,
                    e.n,
                    bytes,
                    e.aux_bytes_peak / a.threads.clamp(1, a.heads) as u64
                );
            }
        }
    }
    emit(&report, &a.output)?;
    Ok(())
}

fn cmd_bench_fusion(a: &BenchFusionArgs) -> CmdResult {
    let shapes = a
        .shapes
        .iter()
        .map(|s| parse_shape(s))
        .collect::<estisr::Result<Vec<_>>>()?;
    let opts = FusionBenchOptions {
        shapes,
        expand_ratio: a.ratio,
        repeats: a.repeats,
        warmup: a.warmup,
        seed: a.seed,
    };
    let mut report = bench::bench_fusion(&opts)?;
    report.environment.thread_count = a.threads.max(1);
    emit(&report, &a.output)?;
    Ok(())
}

fn cmd_forward(
    input: &Path,
    output: &Path,
    config: Option<&Path>,
    params: Option<&Path>,
    save_params: Option<&Path>,
) -> CmdResult {
    let cfg = load_config(config)?;
    let mut net = match params {
        Some(dir) => NetworkParams::from_tensor_dir(&TensorDir::load(dir)?, &cfg)?,
        None => network::init_params::<f32>(&cfg)?,
    };
    if cfg.fuse_rirbs {
        net = net.fused()?;
    }
    if let Some(dir) = save_params {
        net.to_tensor_dir(&cfg)?.save(dir)?;
    }
    let lr = ImageBuffer::load_png(input)?.to_tensor::<f32>(cfg.in_channels)?;
    let sr = network::estisr_forward(&net, &cfg, &lr, None)?;
    let img = ImageBuffer::from_tensor(&sr, 0)?;
    img.save_png(output)?;
    println!(
        "{}x{} -> {}x{} written to {}",
        lr.width(),
        lr.height(),
        img.width(),
        img.height(),
        output.display()
    );
    Ok(())
}

fn cmd_info(config: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    let info = json!({
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "debug_assertions": cfg!(debug_assertions),
        "target_os": std::env::consts::OS,
        "target_arch": std::env::consts::ARCH,
        "available_parallelism": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        "config": cfg,
        "param_count": network::param_count(&cfg),
        "variants": AttentionVariant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&info).map_err(Error::from)?
    );
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Fuse { params, out } => cmd_fuse(&params, &out),
        Command::VerifyFusion(a) => cmd_verify(&a),
        Command::BenchAttn(a) => cmd_bench_attn(&a),
        Command::BenchFusion(a) => cmd_bench_fusion(&a),
        Command::Forward {
            input,
            output,
            config,
            params,
            save_params,
        } => cmd_forward(
            &input,
            &output,
            config.as_deref(),
            params.as_deref(),
            save_params.as_deref(),
        ),
        Command::ParamCount { config } => {
            println!("{}", network::param_count(&load_config(config.as_deref())?));
            Ok(())
        }
        Command::Info { config } => cmd_info(config.as_deref()),
        Command::Compare { a, b } => {
            let (a, b) = (ImageBuffer::load_png(&a)?, ImageBuffer::load_png(&b)?);
            println!(
                "psnr_db={:.4} ssim={:.6}",
                metrics::psnr(&a, &b)?,
                metrics::ssim(&a, &b)?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tolerance(msg)) => {
            eprintln!("FAIL: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
