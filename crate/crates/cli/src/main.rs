use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use patchxfer_core::bench::{self, alloc::TrackingAllocator, BenchOptions};
use patchxfer_core::features::Extractor;
use patchxfer_core::gradient::gradient_density;
use patchxfer_core::image::{from_tensor, read_png, to_tensor, write_png};
use patchxfer_core::matcher::score_histogram;
use patchxfer_core::metrics::{evaluate_y, format_db};
use patchxfer_core::pipeline::{match_images, run_traced, PipelineConfig, SCALE};
use patchxfer_core::tnsr::{save_index_tensor, save_tensor};
use patchxfer_core::PatchGeometry;

#[global_allocator]
static GLOBAL: TrackingAllocator = TrackingAllocator;

const HISTOGRAM_BINS: usize = 10;

/// Reference-based 4x super-resolution with patch texture transfer.
///
/// Metrics are computed on full-range BT.601 luma
/// (Y = 0.299 R + 0.587 G + 0.114 B), not studio-swing YCbCr.
#[derive(Parser, Debug)]
#[command(name = "patchxfer", version)]
struct Cli {
    /// key = value file (window, stride, pad, top_u, extractor, manifest,
    /// seed); command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Super-resolve an LR image 4x using a reference image.
    Sr(SrArgs),
    /// Run the two-stage patch search and dump H and S.
    Match(MatchArgs),
    /// Report correlation-matrix sizes and predicted out-of-memory cells.
    Bench(BenchArgs),
    /// PSNR and SSIM between two images on the Y channel.
    Metrics(MetricsArgs),
    /// Write the gradient-density map of an image, scaled to [0, 1].
    Gd(GdArgs),
}

#[derive(Args, Debug, Default)]
struct SearchFlags {
    /// Patch window k [default: 6]
    #[arg(long)]
    window: Option<usize>,
    /// Patch stride s [default: 2]
    #[arg(long)]
    stride: Option<usize>,
    /// Zero padding p [default: 2]
    #[arg(long)]
    pad: Option<usize>,
    /// Matches kept per query [default: 1]
    #[arg(long = "top-u")]
    top_u: Option<usize>,
    /// file:DIR, builtin-random[:SEED] or builtin-handcrafted [default: builtin-random]
    #[arg(long)]
    extractor: Option<String>,
    /// Weight manifest; seeded random weights when omitted
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Seed for random weights and the random extractor [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SrArgs {
    #[arg(long)]
    lr: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    lr: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Directory receiving H.tnsr, S.tnsr and summary.txt
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[command(flatten)]
    search: SearchFlags,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Feature-map size HxW; repeatable
    #[arg(long, required = true, value_parser = dims_arg)]
    dims: Vec<(usize, usize)>,
    /// Geometries as "k,s,p;k,s,p"
    #[arg(long, default_value = "3,1,1;6,2,2", value_parser = configs_arg)]
    configs: Geometries,
    /// Cells above this footprint are reported OFM (e.g. 24GiB, 8GB)
    #[arg(long = "mem-limit", default_value = "24GiB", value_parser = mem_arg)]
    mem_limit: u64,
    /// Build each fitting matrix and record its peak allocation and time
    #[arg(long = "measure-alloc")]
    measure_alloc: bool,
    /// Feature channels of the random maps used by --measure-alloc
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Write the CSV here instead of printing it
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Debug)]
struct Geometries(Vec<PatchGeometry>);

fn dims_arg(s: &str) -> Result<(usize, usize), String> {
    bench::parse_dims(s).map_err(|e| e.to_string())
}

fn configs_arg(s: &str) -> Result<Geometries, String> {
    bench::parse_configs(s)
        .map(Geometries)
        .map_err(|e| e.to_string())
}

fn mem_arg(s: &str) -> Result<u64, String> {
    bench::parse_mem_limit(s).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args, Debug)]
struct GdArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn pipeline_config(file: Option<&Path>, f: &SearchFlags) -> anyhow::Result<PipelineConfig> {
    let base = match file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            PipelineConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    let g = base.geometry;
    let mut cfg = base.clone();
    cfg.geometry = PatchGeometry::new(
        f.window.unwrap_or(g.window),
        f.stride.unwrap_or(g.stride),
        f.pad.unwrap_or(g.padding),
    )?;
    cfg.top_u = f.top_u.unwrap_or(base.top_u);
    if cfg.top_u == 0 {
        bail!("--top-u must be at least 1");
    }
    cfg.seed = f.seed.unwrap_or(base.seed);
    if let Some(m) = &f.manifest {
        cfg.manifest = Some(m.clone());
    }
    cfg.extractor = match &f.extractor {
        Some(name) => Extractor::parse(name, cfg.seed)?,
        None => match base.extractor {
            Extractor::BuiltinRandom { .. } if f.seed.is_some() => {
                Extractor::BuiltinRandom { seed: cfg.seed }
            }
            other => other,
        },
    };
    Ok(cfg)
}

fn cmd_sr(cli_config: Option<&Path>, a: &SrArgs) -> anyhow::Result<()> {
    let cfg = pipeline_config(cli_config, &a.search)?;
    let start = Instant::now();
    let lr = read_png(&a.lr)?;
    let reference = read_png(&a.reference)?;
    let nets = cfg.networks().context("loading weights")?;
    let trace = run_traced(&to_tensor(&lr), &to_tensor(&reference), &cfg, &nets)?;
    write_png(&a.out, &from_tensor(&trace.sr)?)?;
    let (_, h, w) = trace.sr.dims3()?;
    println!(
        "sr: {}x{} -> {}x{} ({}x) window={} stride={} pad={} top_u={} extractor={}",
        lr.height(),
        lr.width(),
        h,
        w,
        SCALE,
        cfg.geometry.window,
        cfg.geometry.stride,
        cfg.geometry.padding,
        cfg.top_u,
        cfg.extractor.name()
    );
    println!("time: {:.2} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_match(cli_config: Option<&Path>, a: &MatchArgs) -> anyhow::Result<()> {
    let cfg = pipeline_config(cli_config, &a.search)?;
    let lr = to_tensor(&read_png(&a.lr)?);
    let reference = to_tensor(&read_png(&a.reference)?);
    let run = match_images(&lr, &reference, &cfg)?;
    let m = &run.result;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    save_index_tensor(a.out_dir.join("H.tnsr"), m.indices())?;
    save_tensor(a.out_dir.join("S.tnsr"), m.scores())?;

    let mut summary = format!(
        "N_q: {}\nN_k: {}\nu: {}\ngrid: {}x{}\n",
        m.n_queries(),
        run.n_keys,
        m.top_u(),
        m.grid().0,
        m.grid().1
    );
    for t in 0..m.top_u() {
        let row = m.score_row(t);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
        summary.push_str(&format!("mean S[{t}]: {mean:.6}\n"));
    }
    summary.push_str("histogram S[0] over [-1, 1]:\n");
    let hist = score_histogram(m.score_row(0), HISTOGRAM_BINS);
    for (b, count) in hist.iter().enumerate() {
        let lo = -1.0 + 2.0 * b as f64 / HISTOGRAM_BINS as f64;
        let hi = lo + 2.0 / HISTOGRAM_BINS as f64;
        summary.push_str(&format!("  [{lo:+.1}, {hi:+.1}) {count}\n"));
    }
    fs::write(a.out_dir.join("summary.txt"), &summary)
        .with_context(|| format!("writing {}", a.out_dir.display()))?;
    print!("{summary}");
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> anyhow::Result<()> {
    let opts = BenchOptions {
        mem_limit: a.mem_limit,
        materialize: a.measure_alloc,
        channels: a.channels,
        ..BenchOptions::default()
    };
    let report = bench::run_bench(&a.dims, &a.configs.0, &opts)?;
    print!("{}", report.to_table());
    match &a.csv {
        Some(p) => {
            fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?
        }
        None => print!("\n{}", report.to_csv()),
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> anyhow::Result<()> {
    let x = to_tensor(&read_png(&a.a)?);
    let y = to_tensor(&read_png(&a.b)?);
    let (psnr, ssim) = evaluate_y(&x, &y)?;
    println!("PSNR: {} dB, SSIM: {ssim:.4}", format_db(psnr));
    Ok(())
}

fn cmd_gd(a: &GdArgs) -> anyhow::Result<()> {
    let img = to_tensor(&read_png(&a.input)?);
    let gd = gradient_density(&img)?;
    let max = gd.max_value();
    let scaled = if max > 0.0 { gd.scale(1.0 / max)? } else { gd };
    write_png(&a.out, &from_tensor(&scaled)?)?;
    println!("gd: max {max:.6} written to {}", a.out.display());
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PATCHXFER_THREADS") {
        let n: usize =
            v.trim().parse().ok().filter(|&n| n > 0).with_context(|| {
                format!("PATCHXFER_THREADS must be a positive integer, got `{v}`")
            })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Sr(a) => cmd_sr(cfg, a),
        Command::Match(a) => cmd_match(cfg, a),
        Command::Bench(a) => cmd_bench(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Gd(a) => cmd_gd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
