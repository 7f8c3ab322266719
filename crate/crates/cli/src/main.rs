mod commands;
mod config;
mod exit;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::PipelineConfig;
use crate::exit::Failure;

/// Reconstruct driving scenes into voxel assets and compose augmented scenes.
#[derive(Parser, Debug)]
#[command(name = "voxaug", version)]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Asset store directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with exact ground truth.
    Synth(SynthArgs),
    /// Fit the background voxel field from a manifest.
    TrainBackground(TrainBackgroundArgs),
    /// Fit one object track into a canonical-frame asset.
    TrainObject(TrainObjectArgs),
    /// Compute the valid placement region of a background.
    Validregion(ValidRegionArgs),
    /// Sample augmented scene graphs.
    Compose(ComposeArgs),
    /// Render a scene graph with its annotations.
    Render(RenderArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Street,
    Car,
    Wall,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Side {
    #[default]
    All,
    Pos,
    Neg,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<Preset>,
    /// Dataset spec as written by a previous run.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub size: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub noise_amplitude: u32,
    #[arg(long, default_value_t = 0.0)]
    pub noise_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub phase: f64,
    #[arg(long, value_enum, default_value_t = Side::All)]
    pub side: Side,
    /// Also bake the analytic scene into a background asset at this voxel size.
    #[arg(long)]
    pub bake: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainBackgroundArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub voxel_size: Option<f64>,
    #[arg(long)]
    pub depth_weight: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainObjectArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Track id from the manifest labels.
    #[arg(long)]
    pub track: u64,
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub voxel_size: Option<f64>,
    #[arg(long)]
    pub gc_weight: Option<f64>,
    #[arg(long)]
    pub depth_weight: Option<f64>,
    /// spec.json of a synthetic dataset; adds the outside-density audit.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidRegionArgs {
    /// Background asset id or file.
    #[arg(long)]
    pub background: String,
    #[arg(long, num_args = 2, value_names = ["X", "Y"])]
    pub ego: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    #[arg(long)]
    pub background: String,
    /// Object asset ids or files.
    #[arg(long, num_args = 1.., required = true)]
    pub objects: Vec<String>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Manifest providing original boxes and cameras.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Manifest frames whose cameras are attached to each scene.
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<usize>,
    #[arg(long, num_args = 2, value_names = ["X", "Y"])]
    pub ego: Option<Vec<f64>>,
    /// Translation jitter along x, meters.
    #[arg(long)]
    pub tx: Option<f64>,
    #[arg(long)]
    pub ty: Option<f64>,
    /// Yaw jitter, degrees.
    #[arg(long)]
    pub ttheta: Option<f64>,
    /// Draw base poses anywhere in the valid region.
    #[arg(long)]
    pub uniform: bool,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Camera index; all cameras when omitted.
    #[arg(long)]
    pub camera: Option<usize>,
}

fn pair(v: &Option<Vec<f64>>) -> Option<[f64; 2]> {
    v.as_ref().map(|v| [v[0], v[1]])
}

fn run(cli: Cli) -> Result<serde_json::Value, Failure> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed.or(config.seed) {
        config.apply_seed(seed);
    }
    if let Some(t) = cli.threads {
        config.threads = Some(t);
    }
    if let Some(o) = cli.output {
        config.paths.output = Some(o);
    }
    if let Some(s) = cli.store {
        config.paths.asset_store = Some(s);
    }
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::general(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(a) => commands::synth(a, &config),
        Command::TrainBackground(a) => commands::train_background_cmd(a, &config),
        Command::TrainObject(a) => commands::train_object_cmd(a, &config),
        Command::Validregion(a) => commands::validregion(a, pair(&a.ego), &config),
        Command::Compose(a) => commands::compose(a, pair(&a.ego), &config),
        Command::Render(a) => commands::render(a, &config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
