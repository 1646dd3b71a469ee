//! Argument parsing and subcommand bodies for the `pcal` binary.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pcal_core::datasets::{generate_dataset_with, read_dataset, write_dataset, Family};
use pcal_core::experiment::{run_experiment, ExperimentConfig};
use pcal_core::nnet::{load_checkpoint, save_checkpoint};
use pcal_core::session::SessionConfig;
use pcal_core::trainer::{pretrain_with_progress, TrainConfig};
use pcal_server::state::CloudEntry;
use pcal_server::{AppState, ServerConfig};

pub const DEFAULT_PORT: u16 = 8080;
pub const CHECKPOINT_FILE: &str = "base.ckpt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pcal_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "pcal", version, about = "Interactive point cloud part annotation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic labeled shapes as PLY files plus label sidecars.
    GenDataset(GenDatasetArgs),
    /// Train a base model with full supervision and save a checkpoint.
    Pretrain(PretrainArgs),
    /// Run simulated annotation over a shape sequence and write reports.
    Experiment(ExperimentArgs),
    /// Serve the HTTP annotation API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long, value_parser = parse_family)]
    pub family: Family,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long, default_value_t = 3)]
    pub parts: usize,
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Experiment config; its `[dataset]`, `[pretrain]` and `[train]` sections are used.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    pub config: Option<PathBuf>,
    /// Directory written by `gen-dataset`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the training RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Runs this single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PCAL_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Session defaults as TOML with optional `[grow]`, `[train]` and `normal_neighbors`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial base model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory for per-session event logs.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    /// Preloads this many generated chairs with ground truth, for demos.
    #[arg(long, default_value_t = 0)]
    pub demo: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_family(s: &str) -> Result<Family, String> {
    match s {
        "chair" => Ok(Family::Chair),
        "table" => Ok(Family::Table),
        "lamp" => Ok(Family::Lamp),
        "two_class_plant" | "plant" => Ok(Family::TwoClassPlant),
        other => Err(format!("unknown family `{other}` (chair, table, lamp, plant)")),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

pub fn gen_dataset(args: &GenDatasetArgs) -> Result<(), CliError> {
    let items = generate_dataset_with(args.family, args.count, args.parts, args.seed, args.points, args.noise)?;
    std::fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    let manifest = write_dataset(&args.out_dir, &items, Some(args.family))?;
    log::info!("wrote {} shapes to {}", manifest.entries.len(), args.out_dir.display());
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> Result<PathBuf, CliError> {
    let (data, mut train) = match (&args.config, &args.data) {
        (Some(path), None) => {
            let config = ExperimentConfig::load(path)?;
            let d = &config.dataset;
            let count = config.pretrain.count.unwrap_or(d.count);
            let data = generate_dataset_with(d.family, count, d.part_count, config.pretrain.rng_seed, d.points_n, d.noise_sigma)?;
            (data, config.train)
        }
        (None, Some(dir)) => (read_dataset(dir)?.1, TrainConfig::default()),
        _ => return Err(CliError::Usage("give exactly one of --config or --data".into())),
    };
    if let Some(epochs) = args.epochs {
        train.pretrain_epochs = epochs;
    }
    if let Some(seed) = args.seed {
        train.rng_seed = seed;
    }
    let report = pretrain_with_progress(&data, &train, &mut |p| {
        log::info!("epoch {}/{} loss {:.4}", p.epoch, p.epochs, p.loss.total);
    })?;
    let path = args.out_dir.join(CHECKPOINT_FILE);
    write_file(&path, save_checkpoint(&report.params))?;
    let summary = serde_json::json!({
        "shapes": data.len(),
        "epochs": train.pretrain_epochs,
        "train_accuracy": report.train_accuracy,
    });
    write_file(&args.out_dir.join("pretrain.json"), format!("{summary:#}\n"))?;
    log::info!("train accuracy {:.4}; checkpoint {}", report.train_accuracy, path.display());
    Ok(path)
}

pub fn experiment(args: &ExperimentArgs) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.experiment.seeds = vec![seed];
    }
    let result = run_experiment(&config, |line| log::info!("{line}"))?;
    result.write(&args.out_dir)?;
    print!("{}", result.summary_markdown());
    Ok(())
}

pub fn server_config(args: &ServeArgs) -> Result<ServerConfig, CliError> {
    let session_defaults = match &args.config {
        Some(path) => {
            let config: SessionConfig = toml::from_str(&read_text(path)?)
                .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?;
            config.validate()?;
            config
        }
        None => SessionConfig::default(),
    };
    let base_model = match &args.model {
        Some(path) => Some(load_checkpoint(&std::fs::read(path).map_err(io_err(path))?)?),
        None => None,
    };
    Ok(ServerConfig { session_defaults, base_model, log_dir: args.log_dir.clone() })
}

pub async fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let state = AppState::new(server_config(args)?);
    if args.demo > 0 {
        let shapes = generate_dataset_with(Family::Chair, args.demo, 3, args.seed, 1024, 0.01)?;
        for (cloud, truth) in shapes {
            let id = cloud.id().to_string();
            let entry = CloudEntry { cloud: cloud.into(), truth: Some(truth) };
            state.add_cloud(id, entry).map_err(|e| CliError::Usage(e.to_string()))?;
        }
    }
    let addr = SocketAddr::new(args.host, args.port);
    pcal_server::serve(addr, state).await.map_err(|source| CliError::Io { path: addr.to_string().into(), source })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenDataset(args) => gen_dataset(&args),
        Command::Pretrain(args) => pretrain(&args).map(|_| ()),
        Command::Experiment(args) => experiment(&args),
        Command::Serve(args) => {
            let runtime = tokio::runtime::Runtime::new().map_err(|source| CliError::Io { path: "runtime".into(), source })?;
            runtime.block_on(serve(&args))
        }
    }
}
