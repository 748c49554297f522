use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbaImage;
use scene_edit::assets::{AssetError, AssetStore};
use scene_edit::dataset::{generate_dataset, validate_dataset, DatasetConfig, DatasetError, GenerationSummary};
use scene_edit::metrics::{psnr, series_mean, ssim, MetricError};
use scene_edit::sampler::{SamplerConfig, SamplerError};
use scene_edit::{Canvas, Domain};

use crate::server::{self, ServerConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Assets(#[from] AssetError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("cannot read image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("asset set at {0} has no {1}")]
    EmptyAssets(String, &'static str),
    #[error("{0}")]
    Usage(String),
    #[error("server failed: {0}")]
    Server(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "scene-edit", version, about = "Deterministic scene editing: data generation, validation, metrics, and an editing service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate compositing-domain edit sequences from an asset directory.
    GenReal(GenArgs),
    /// Generate planning-domain sequences with replayable scene scripts.
    PlanSyn(GenArgs),
    /// Replay every sequence of a dataset and report violations.
    Validate(ValidateArgs),
    /// PSNR and SSIM between two images, or averaged over a frame series.
    Metrics(MetricsArgs),
    /// Run the HTTP editing service.
    Serve(ServeArgs),
    /// Write the built-in demo asset set to a directory.
    MakeAssets(MakeAssetsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Asset directory containing assets.json.
    #[arg(long)]
    pub assets: PathBuf,
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of sequences to generate.
    #[arg(long, default_value_t = 1)]
    pub num_seqs: usize,
    /// Rounds per sequence; overrides the config file. History bounds are
    /// clamped to fit.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Base seed; sequence i uses seed + i. Overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = 512)]
    pub canvas: u32,
    /// Sampler config (.toml, otherwise JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Dataset root containing manifest.json.
    pub dataset: PathBuf,
    /// Print the full report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Two images to compare.
    #[arg(num_args = 0..=2)]
    pub images: Vec<PathBuf>,
    /// Frame series; metrics are averaged over adjacent pairs.
    #[arg(long, num_args = 2.., conflicts_with = "images")]
    pub series: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GeneratorKind {
    Oracle,
    NetworkStub,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Port to listen on (127.0.0.1).
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Asset directory containing assets.json.
    #[arg(long)]
    pub assets: PathBuf,
    /// Default square canvas side for new sessions.
    #[arg(long, default_value_t = 512)]
    pub canvas: u32,
    /// Default history window N for new sessions.
    #[arg(long, default_value_t = 4)]
    pub max_history: usize,
    /// Frame generator backing the sessions.
    #[arg(long, value_enum, default_value_t = GeneratorKind::Oracle)]
    pub generator: GeneratorKind,
    /// Service seed for generators and default placements.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Idle session lifetime in seconds.
    #[arg(long, default_value_t = 1800)]
    pub ttl: u64,
    /// Dataset root that session exports are written into.
    #[arg(long, default_value = "exports")]
    pub export_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeAssetsArgs {
    /// Destination directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Background side length in pixels.
    #[arg(long, default_value_t = 512)]
    pub background_size: u32,
}

pub fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::GenReal(a) => {
            let s = generate(Domain::Real, &a)?;
            print_summary(&s);
            Ok(ExitCode::SUCCESS)
        }
        Command::PlanSyn(a) => {
            let s = generate(Domain::Syn, &a)?;
            print_summary(&s);
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate(a) => {
            let report = validate_dataset(&a.dataset);
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                for v in &report.violations {
                    let round = v.round.map_or_else(|| "-".to_string(), |r| r.to_string());
                    println!("{} round {round}: {} {}", v.sequence, v.code, v.message);
                }
                println!(
                    "checked {} sequences, {} violations",
                    report.sequences_checked,
                    report.violations.len()
                );
            }
            Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Metrics(a) => {
            let (p, s) = metrics(&a)?;
            println!("PSNR={} SSIM={s:.6}", format_db(p));
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve(a) => {
            let assets = load_assets(&a.assets)?;
            if a.max_history == 0 {
                return Err(CliError::Usage("--max-history must be at least 1".into()));
            }
            let cfg = ServerConfig {
                canvas: Canvas::square(a.canvas),
                max_history: a.max_history,
                generator: a.generator,
                seed: a.seed,
                ttl: Duration::from_secs(a.ttl),
                export_dir: a.export_dir,
            };
            server::serve(a.port, assets, cfg)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeAssets(a) => {
            let store = AssetStore::demo(a.seed, a.background_size);
            store.write_dir(&a.out)?;
            println!("wrote {} assets to {}", store.len(), a.out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_summary(s: &GenerationSummary) {
    println!(
        "generated {} sequences, {} frames, {} truncated, config_hash={}",
        s.sequences, s.frames, s.truncated, s.config_hash
    );
}

fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

pub fn load_assets(dir: &Path) -> Result<AssetStore, CliError> {
    let store = AssetStore::load_dir(dir)?;
    if store.is_empty() {
        return Err(CliError::EmptyAssets(dir.display().to_string(), "assets"));
    }
    Ok(store)
}

/// Resolves the sampler config from the file and flag overrides.
pub fn dataset_config(domain: Domain, args: &GenArgs) -> Result<DatasetConfig, CliError> {
    let mut sampler = match &args.config {
        Some(path) => SamplerConfig::load(path)?,
        None => SamplerConfig::default(),
    };
    if let Some(len) = args.seq_len {
        sampler.seq_len = len;
        sampler.r_max = sampler.r_max.min(len).max(1);
        sampler.r_min = sampler.r_min.min(sampler.r_max);
    }
    if let Some(seed) = args.seed {
        sampler.seed = seed;
    }
    sampler.validate()?;
    if args.canvas == 0 {
        return Err(CliError::Usage("--canvas must be positive".into()));
    }
    Ok(DatasetConfig {
        domain,
        canvas: Canvas::square(args.canvas),
        num_seqs: args.num_seqs,
        base_seed: sampler.seed,
        sampler,
    })
}

pub fn generate(domain: Domain, args: &GenArgs) -> Result<GenerationSummary, CliError> {
    let assets = load_assets(&args.assets)?;
    if assets.objects(domain.asset_kind()).is_empty() {
        let what = match domain {
            Domain::Real => "object layers",
            Domain::Syn => "box assets",
        };
        return Err(CliError::EmptyAssets(args.assets.display().to_string(), what));
    }
    if domain == Domain::Real && assets.backgrounds().is_empty() {
        return Err(CliError::EmptyAssets(args.assets.display().to_string(), "backgrounds"));
    }
    let cfg = dataset_config(domain, args)?;
    Ok(generate_dataset(&cfg, &assets, &args.out)?)
}

fn read_image(path: &Path) -> Result<RgbaImage, CliError> {
    image::open(path)
        .map(|i| i.to_rgba8())
        .map_err(|source| CliError::Image {
            path: path.display().to_string(),
            source,
        })
}

/// Returns (PSNR, SSIM) for a pair or the adjacent-pair mean of a series.
pub fn metrics(args: &MetricsArgs) -> Result<(f64, f64), CliError> {
    let paths = if args.series.is_empty() { &args.images } else { &args.series };
    if args.series.is_empty() && args.images.len() != 2 {
        return Err(CliError::Usage("pass two images or --series with at least two frames".into()));
    }
    let frames = paths.iter().map(|p| read_image(p)).collect::<Result<Vec<_>, _>>()?;
    Ok((series_mean(&frames, psnr)?, series_mean(&frames, ssim)?))
}
