//! `ffuse`: generate, correlate, fuse and train paired feature streams.
//!
//! Exit codes: 0 success, 1 domain or runtime error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use ffuse_core::gradcheck::run_gradient_audit;
use ffuse_core::io::{
    export_correlation, read_feature_file, write_feature_file, write_train_outputs, RunManifest,
};
use ffuse_core::{
    align_pair, cross_correlation, downsample, generate_pair, train, Example, FeatureMatrix,
    FusionConfig, FusionMethod, FusionModel, OptimizerKind, ProjectionInit, SynthSpec, TrainConfig,
};

const SEED_ENV: &str = "FFUSE_SEED";
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "ffuse",
    version,
    about = "Feature-stream fusion with decorrelation training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic correlated stream pair.
    Gen(GenArgs),
    /// Cross-correlation between two streams (optionally after projection).
    Corr(CorrArgs),
    /// Fuse two streams into one feature file.
    Fuse(FuseArgs),
    /// Train the fusion frontend and write a report directory.
    Train(TrainArgs),
    /// Finite-difference audit of every backward pass.
    CheckGrad(CheckGradArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Number of frames.
    #[arg(long = "T", visible_alias = "frames", default_value_t = 10_000)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    k1: usize,
    #[arg(long, default_value_t = 32)]
    k2: usize,
    #[arg(long, default_value_t = 0.65, allow_hyphen_values = true)]
    rho: f64,
    /// Number of correlated leading dimensions.
    #[arg(long)]
    paired: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20.0)]
    stride_u: f64,
    #[arg(long, default_value_t = 20.0)]
    stride_v: f64,
    #[arg(long)]
    out_u: PathBuf,
    #[arg(long)]
    out_v: PathBuf,
}

#[derive(Args, Debug)]
struct CorrArgs {
    #[arg(long)]
    u: PathBuf,
    #[arg(long)]
    v: PathBuf,
    /// Project both streams to this width with freshly initialized weights.
    #[arg(long)]
    project: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_init, default_value = "independent")]
    init: ProjectionInit,
    #[arg(long, default_value = "corr.csv")]
    csv: PathBuf,
    #[arg(long, default_value = "corr.pgm")]
    pgm: PathBuf,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long, value_parser = parse_method)]
    method: FusionMethod,
    #[arg(long)]
    u: PathBuf,
    #[arg(long)]
    v: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Common dimension for lp and wsum.
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trained parameters (params.json from `train`) instead of a fresh init.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Also apply the final projection to the downstream width.
    #[arg(long)]
    project_output: bool,
    #[arg(long, default_value_t = 80)]
    output_dim: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    u: PathBuf,
    #[arg(long)]
    v: PathBuf,
    /// Task target for the frontend output; required unless --task-weight 0.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, value_parser = parse_method, default_value = "lp")]
    method: FusionMethod,
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    #[arg(long, default_value_t = 2_000)]
    steps: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 80)]
    output_dim: usize,
    #[arg(long, value_parser = parse_optimizer, default_value = "adam")]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 1.0)]
    task_weight: f64,
    #[arg(long, value_parser = parse_init, default_value = "independent")]
    init: ProjectionInit,
    /// Output directory for the manifest, report and correlation exports.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_method(s: &str) -> Result<FusionMethod, String> {
    s.parse().map_err(|e: ffuse_core::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse().map_err(|e: ffuse_core::Error| e.to_string())
}

fn parse_init(s: &str) -> Result<ProjectionInit, String> {
    match s {
        "independent" => Ok(ProjectionInit::Independent),
        "tied" => Ok(ProjectionInit::Tied),
        other => Err(format!(
            "unknown init '{other}' (expected independent or tied)"
        )),
    }
}

/// `FFUSE_SEED`, when set, wins over `--seed`.
fn effective_seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={raw} is not an unsigned integer")),
        Err(_) => Ok(flag),
    }
}

fn read(path: &Path) -> Result<FeatureMatrix> {
    read_feature_file(path).with_context(|| format!("reading {}", path.display()))
}

fn gen(args: GenArgs) -> Result<()> {
    let spec = SynthSpec {
        frames: args.frames,
        dims_u: args.k1,
        dims_v: args.k2,
        rho: args.rho,
        paired_dims: args.paired.unwrap_or(args.k1.min(args.k2)),
        seed: effective_seed(args.seed)?,
        stride_ms_u: args.stride_u,
        stride_ms_v: args.stride_v,
    };
    let (u, v) = generate_pair(&spec)?;
    write_feature_file(&args.out_u, &u)?;
    write_feature_file(&args.out_v, &v)?;
    println!(
        "wrote {} ({}x{}) and {} ({}x{})",
        args.out_u.display(),
        u.frames(),
        u.dims(),
        args.out_v.display(),
        v.frames(),
        v.dims()
    );
    Ok(())
}

fn corr(args: CorrArgs) -> Result<()> {
    let (u, v) = align_pair(&read(&args.u)?, &read(&args.v)?)?;
    let (ut, vt) = match args.project {
        Some(k) => {
            let cfg = FusionConfig {
                method: FusionMethod::LinearProjection,
                common_dim: k,
                init: args.init,
                ..FusionConfig::default()
            };
            let model = FusionModel::init(u.dims(), v.dims(), &cfg, effective_seed(args.seed)?)?;
            let (ut, vt) = model.project_streams(u.view(), v.view())?;
            (
                FeatureMatrix::new(ut, u.stride_ms())?,
                FeatureMatrix::new(vt, v.stride_ms())?,
            )
        }
        None if u.dims() != v.dims() => bail!(
            "streams have {} and {} dims; pass --project K to compare them",
            u.dims(),
            v.dims()
        ),
        None => (u, v),
    };
    let c = cross_correlation(&ut, &vt)?;
    export_correlation(&c, &args.csv, &args.pgm)?;
    println!("frames={}", ut.frames());
    println!("max_abs_corr={}", c.max_abs());
    println!("mean_abs_corr={}", c.mean_abs());
    println!("max_abs_diag={}", c.max_abs_diagonal());
    Ok(())
}

fn fuse(args: FuseArgs) -> Result<()> {
    let (u, v) = align_pair(&read(&args.u)?, &read(&args.v)?)?;
    let model = match &args.params {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let model = FusionModel::from_json(&text)?;
            if model.method != args.method {
                bail!(
                    "parameter file holds a '{}' model, not '{}'",
                    model.method,
                    args.method
                );
            }
            model
        }
        None => {
            let cfg = FusionConfig {
                method: args.method,
                common_dim: args.k,
                output_dim: args.output_dim,
                ..FusionConfig::default()
            };
            FusionModel::init(u.dims(), v.dims(), &cfg, effective_seed(args.seed)?)?
        }
    };
    let pass = model.forward(u.view(), v.view())?;
    let out = if args.project_output {
        pass.output
    } else {
        pass.fused
    };
    let out = FeatureMatrix::new(out, u.stride_ms())?;
    write_feature_file(&args.out, &out)?;
    println!(
        "wrote {} ({}x{})",
        args.out.display(),
        out.frames(),
        out.dims()
    );
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let (u, v) = align_pair(&read(&args.u)?, &read(&args.v)?)?;
    let (u, v, target) = match &args.target {
        Some(path) => {
            let target = read(path)?;
            let target = if target.stride_ms() == u.stride_ms() {
                target
            } else {
                downsample(&target, u.stride_ms())
                    .with_context(|| format!("aligning {} to the streams", path.display()))?
            };
            let frames = u.frames().min(target.frames());
            (
                u.truncate(frames)?,
                v.truncate(frames)?,
                target.truncate(frames)?.into_data(),
            )
        }
        None if args.task_weight == 0.0 => {
            let zeros = Array2::zeros((u.frames(), args.output_dim));
            (u, v, zeros)
        }
        None => bail!("--target is required unless --task-weight is 0"),
    };

    let fusion = FusionConfig {
        method: args.method,
        common_dim: args.k,
        output_dim: args.output_dim,
        epsilon: args.epsilon,
        lambda: args.lambda,
        init: args.init,
    };
    let cfg = TrainConfig {
        steps: args.steps,
        learning_rate: args.lr,
        warmup_steps: args.warmup,
        seed,
        optimizer: args.optimizer,
        task_weight: args.task_weight,
        ..TrainConfig::default()
    };
    let report = train(&[Example::new(u, v, target)], &fusion, &cfg)?;

    let mut manifest = RunManifest::from_configs(&fusion, &cfg);
    manifest
        .inputs
        .insert("u".into(), args.u.display().to_string());
    manifest
        .inputs
        .insert("v".into(), args.v.display().to_string());
    if let Some(t) = &args.target {
        manifest
            .inputs
            .insert("target".into(), t.display().to_string());
    }
    let outputs = write_train_outputs(&args.report, manifest, &report)?;

    if let Some(raw) = &report.raw_correlation {
        println!("max_abs_corr_raw={}", raw.max_abs());
    }
    println!("max_abs_corr_initial={}", report.max_abs_corr_initial);
    println!("max_abs_corr_final={}", report.max_abs_corr_final);
    if let Some(last) = report.history.last() {
        println!("final_total={}", last.loss.total);
    }
    println!("wall_time_ms={}", report.wall_time_ms);
    println!("manifest={}", outputs.manifest.display());
    Ok(())
}

fn check_grad(args: CheckGradArgs) -> Result<bool> {
    let report = run_gradient_audit(effective_seed(args.seed)?)?;
    for e in &report.entries {
        println!(
            "{:<24} max_rel_err={:.3e} checked={} skipped={}",
            e.name, e.max_rel_err, e.checked, e.skipped
        );
    }
    println!("max_rel_err={:e}", report.max_rel_err());
    Ok(report.passes(GRAD_TOLERANCE))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Corr(a) => corr(a).map(|_| true),
        Command::Fuse(a) => fuse(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::CheckGrad(a) => check_grad(a),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient audit exceeded tolerance {GRAD_TOLERANCE:e}");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
