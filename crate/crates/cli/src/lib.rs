//! `gpdbn` command line: train, sample, project, evaluate, interpolate,
//! export and serve GPDBN models.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gpdbn_core::checkpoint;
use gpdbn_core::data::{self, IdxOptions, ImageDataset, NoiseMode};
use gpdbn_core::decoder::DecoderConfig;
use gpdbn_core::evaluation::{self, InterpolationConfig};
use gpdbn_core::gpdbn::{GpdbnModel, ProjectConfig};
use gpdbn_core::numerics::Tensor;
use gpdbn_core::trainer::{self, BatchSize, TrainConfig};
use gpdbn_core::ModelRng;
use rand::SeedableRng;

/// Edge length of generated star frames.
pub const STARS_SIZE: usize = 32;
pub const STARS_COUNT: usize = 30;

#[derive(Debug, Parser)]
#[command(name = "gpdbn", version, about = "Gaussian-process deep belief networks for binary images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write a checkpoint.
    Train(TrainArgs),
    /// Decode the mean of J samples at a latent point.
    Sample(SampleArgs),
    /// Project one PGM silhouette onto the learned manifold.
    Project(ProjectArgs),
    /// Noisy-projection SSIM over a test set.
    Eval(EvalArgs),
    /// Geodesic interpolation between the first and last training images.
    Interp(InterpArgs),
    /// Write the variance heat map and decoded thumbnails as JSON.
    ExportManifold(ExportArgs),
    /// Serve a model and its manifold export over HTTP.
    Serve(ServeArgs),
    /// Write the rotating-star silhouettes as PGM files.
    GenStars(GenStarsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `stars`, `mnist:<idx images file>`, a `.bsil` file or a directory of PGMs.
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value = "200,100,50")]
    pub arch: String,
    #[arg(long, default_value_t = 2)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 1000)]
    pub iters: u64,
    /// Rows per step, or `full`.
    #[arg(long, default_value = "full")]
    pub batch_size: BatchSize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Also checkpoint every N iterations.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated latent coordinates.
    #[arg(long, allow_hyphen_values = true)]
    pub at: String,
    #[arg(long, default_value_t = 25)]
    pub j: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Salt-and-pepper fraction applied before projecting.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Same forms as `train --data`.
    #[arg(long)]
    pub test: String,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    /// `resample` or `flip`.
    #[arg(long, default_value = "resample")]
    pub noise_mode: NoiseMode,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Image family scored against; defaults to the star frames at the
    /// model's size.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub grid: usize,
    #[arg(long, default_value_t = 25)]
    pub j: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifold: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Master seed for per-request generators.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenStarsArgs {
    #[arg(long, default_value_t = STARS_COUNT)]
    pub n: usize,
    #[arg(long, default_value_t = STARS_SIZE)]
    pub size: usize,
    #[arg(long, default_value = "stars")]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gpdbn_core::Error),
    #[error(transparent)]
    Serve(#[from] gpdbn_serve::ServeError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Formats with six significant digits, switching to exponent form for
/// very large or small magnitudes.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp).max(0) as usize, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

/// Loads a dataset from `stars`, `mnist:<idx file>`, a `.bsil` file or a
/// directory of PGMs.
pub fn load_data(spec: &str, limit: Option<usize>) -> Result<ImageDataset> {
    let ds = if spec == "stars" {
        data::gen_stars(STARS_COUNT, STARS_SIZE, 0)?
    } else if let Some(path) = spec.strip_prefix("mnist:") {
        let opts = IdxOptions {
            limit,
            ..IdxOptions::default()
        };
        return Ok(data::load_idx(Path::new(path), None, &opts)?);
    } else {
        let path = Path::new(spec);
        if path.is_dir() {
            data::load_pgm_dir(path)?
        } else if path.extension().is_some_and(|e| e == "bsil") {
            data::load_bsil(path)?
        } else if !path.exists() {
            return Err(CliError::Usage(format!("{spec}: no such file or directory")));
        } else {
            return Err(CliError::Usage(format!(
                "{spec}: expected `stars`, `mnist:<file>`, a .bsil file or a directory of .pgm files"
            )));
        }
    };
    Ok(match limit {
        Some(n) if n < ds.len() => ds.head(n)?,
        _ => ds,
    })
}

fn parse_point(s: &str, q: usize) -> Result<Tensor> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| CliError::Usage(format!("--at {s:?}: expected comma-separated numbers")))?;
    if v.len() != q {
        return Err(CliError::Usage(format!("--at has {} coordinates, the model's latent space has {q}", v.len())));
    }
    Ok(Tensor::row_vector(v))
}

fn coords(t: &Tensor) -> String {
    t.data().iter().map(|&v| sig6(v)).collect::<Vec<_>>().join(",")
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let ds = load_data(&a.data, a.limit)?;
    let model = match &a.resume {
        Some(path) => checkpoint::load(path)?,
        None => {
            let cfg = DecoderConfig::from_arch(&a.arch, ds.pixels())?;
            trainer::init_model(&ds, &cfg, a.latent_dim, a.seed)?
        }
    };
    let cfg = TrainConfig {
        iters: a.iters,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        log_every: a.log_every.max(1),
        checkpoint_path: Some(a.out.clone()),
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    let mut write_err = None;
    trainer::train_with(model, &ds, &cfg, |r| {
        let b = &r.breakdown;
        let line = format!(
            "iter={} total={} data={} joint={} complexity={} prior={} ms={}",
            r.iter,
            sig6(b.total),
            sig6(b.data_term),
            sig6(b.joint_term),
            sig6(b.complexity_term),
            sig6(b.prior_term),
            sig6(r.ms)
        );
        if let Err(e) = writeln!(out, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(Path::new("<stdout>"))(e));
    }
    writeln!(out, "wrote {}", a.out.display()).map_err(io_err(Path::new("<stdout>")))
}

fn sample(a: &SampleArgs, out: &mut dyn Write) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let x = parse_point(&a.at, model.q())?;
    let mut rng = ModelRng::seed_from_u64(a.seed);
    let pred = model.predictor()?;
    let img = pred.predict_mean(&x, a.j, &mut rng)?;
    data::write_pgm(&a.out, &img, model.width, model.height)?;
    writeln!(out, "log_variance={} wrote {}", sig6(pred.log_variance(&x)?), a.out.display()).map_err(io_err(Path::new("<stdout>")))
}

fn check_size(model: &GpdbnModel, w: usize, h: usize, what: &Path) -> Result<()> {
    if (w, h) != (model.width, model.height) {
        return Err(CliError::Usage(format!(
            "{}: image is {w}x{h}, model expects {}x{}",
            what.display(),
            model.width,
            model.height
        )));
    }
    Ok(())
}

fn project(a: &ProjectArgs, out: &mut dyn Write) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let (clean, w, h) = data::load_pgm(&a.image)?;
    check_size(&model, w, h, &a.image)?;
    let mut rng = ModelRng::seed_from_u64(a.seed);
    let target = data::salt_pepper(&clean, a.noise, NoiseMode::Resample, &mut rng)?;
    let cfg = ProjectConfig {
        restarts: a.restarts,
        steps: a.steps,
        ..ProjectConfig::default()
    };
    let proj = model.predictor()?.project(&target, &cfg, &mut rng)?;
    data::write_pgm(&a.out, &proj.recon, w, h)?;
    writeln!(
        out,
        "x={} loss={} gamma={} ssim_recon={} ssim_input={} wrote {}",
        coords(&proj.x),
        sig6(proj.loss),
        sig6(proj.gamma),
        sig6(data::ssim3(&proj.recon, &clean, w, h)?),
        sig6(data::ssim3(&target, &clean, w, h)?),
        a.out.display()
    )
    .map_err(io_err(Path::new("<stdout>")))
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let test = load_data(&a.test, a.limit)?;
    let mut rng = ModelRng::seed_from_u64(a.seed);
    let cfg = ProjectConfig {
        restarts: a.restarts,
        ..ProjectConfig::default()
    };
    let report = evaluation::projection_experiment(&model, &test, a.noise, a.noise_mode, &cfg, &mut rng)?;
    if let Some(path) = &a.report {
        fs::write(path, report.to_csv()).map_err(io_err(path))?;
    }
    let (rm, rs) = report.recon();
    let (nm, ns) = report.noisy();
    writeln!(
        out,
        "images={} ssim_recon={}±{} ssim_noisy={}±{}",
        report.records.len(),
        sig6(rm),
        sig6(rs),
        sig6(nm),
        sig6(ns)
    )
    .map_err(io_err(Path::new("<stdout>")))
}

fn interp(a: &InterpArgs, out: &mut dyn Write) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let family = match &a.data {
        Some(spec) => load_data(spec, None)?,
        None => data::gen_stars(model.n(), model.width, 0)?,
    };
    if (family.width(), family.height()) != (model.width, model.height) {
        return Err(CliError::Usage("interpolation family and model image sizes differ".into()));
    }
    let cfg = InterpolationConfig {
        frames: a.frames,
        repeats: a.repeats,
        ..InterpolationConfig::default()
    };
    let mut rng = ModelRng::seed_from_u64(a.seed);
    let r = evaluation::interpolation_test(&model, &family, &cfg, &mut rng)?;
    let frames = r.frame_scores.iter().map(|&v| sig6(v)).collect::<Vec<_>>().join(",");
    writeln!(out, "ssim={}±{} repeats={} frames={frames}", sig6(r.mean), sig6(r.sd), r.repeats.len())
        .map_err(io_err(Path::new("<stdout>")))
}

fn export(a: &ExportArgs, out: &mut dyn Write) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let mut rng = ModelRng::seed_from_u64(a.seed);
    let export = evaluation::export_manifold(&model, a.grid, a.j, &mut rng)?;
    fs::write(&a.out, export.to_json()).map_err(io_err(&a.out))?;
    writeln!(out, "cells={} wrote {}", a.grid * a.grid, a.out.display()).map_err(io_err(Path::new("<stdout>")))
}

fn serve(a: &ServeArgs) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let json = fs::read_to_string(&a.manifold).map_err(io_err(&a.manifold))?;
    let state = gpdbn_serve::ServeState::from_json(model, json, a.seed)?;
    let rt = tokio::runtime::Runtime::new().map_err(io_err(Path::new("<runtime>")))?;
    rt.block_on(gpdbn_serve::run(state, SocketAddr::new(a.host, a.port)))?;
    Ok(())
}

fn gen_stars(a: &GenStarsArgs, out: &mut dyn Write) -> Result<()> {
    let ds = data::gen_stars(a.n, a.size, 0)?;
    let files = data::write_pgm_dir(&ds, &a.out, "star_")?;
    writeln!(out, "wrote {} images to {}", files.len(), a.out.display()).map_err(io_err(Path::new("<stdout>")))
}

/// Runs an already parsed command, writing results to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a, out),
        Command::Sample(a) => sample(a, out),
        Command::Project(a) => project(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Interp(a) => interp(a, out),
        Command::ExportManifold(a) => export(a, out),
        Command::Serve(a) => serve(a),
        Command::GenStars(a) => gen_stars(a, out),
    }
}

/// Applies `GPDBN_THREADS` to the matrix-multiply backend. Must run before
/// the first multiplication.
pub fn apply_thread_limit() {
    if let Ok(n) = std::env::var("GPDBN_THREADS") {
        match n.parse::<usize>() {
            Ok(k) if k > 0 => std::env::set_var("MATMUL_NUM_THREADS", k.to_string()),
            _ => log::warn!("ignoring GPDBN_THREADS={n:?}: expected a positive integer"),
        }
    }
}

/// Parses `argv` and runs it. Returns the process exit code: 0 on success,
/// 1 on runtime failure, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    apply_thread_limit();
    match execute(&cli, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
