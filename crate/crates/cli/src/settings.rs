//! Flags, config files, and their resolution into one [`Settings`].
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, flags.
//! The service address falls back to the environment when neither names one.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use vecsketch_core::objective::{Prompt, PromptSet};
use vecsketch_core::optim::AdamConfig;
use vecsketch_core::scene::WidthBounds;
use vecsketch_core::{AugmentConfig, CanvasConfig, LearningRates, Mode, RasterConfig, RunConfig};

use crate::error::CliError;

pub const DEFAULT_OUT: &str = "out";
pub const DEFAULT_TIMEOUT_S: f64 = 60.0;
pub const DEFAULT_EMBEDDING_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Service,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Strokes,
    Pixels,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Strokes => Mode::Strokes,
            ModeArg::Pixels => Mode::Pixels,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vecsketch", version, about = "Draw text prompts with optimized Bézier strokes")]
#[command(args_conflicts_with_subcommands = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,

    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the deterministic mock backend over the scoring protocol.
    ServeMock(ServeMockArgs),
}

#[derive(Debug, Args)]
pub struct ServeMockArgs {
    /// Listen on this TCP address instead of stdin/stdout.
    #[arg(long, value_name = "HOST:PORT")]
    pub listen: Option<String>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Positive prompt, optionally suffixed with `:weight`. Repeatable.
    #[arg(long = "prompt", value_name = "TEXT[:WEIGHT]")]
    pub prompts: Vec<String>,

    /// Negative prompt, optionally suffixed with `:weight`. Repeatable.
    #[arg(long = "negative", value_name = "TEXT[:WEIGHT]")]
    pub negatives: Vec<String>,

    /// Multiplier applied to every negative prompt weight.
    #[arg(long, value_name = "LAMBDA")]
    pub negative_scale: Option<f64>,

    #[arg(long, value_name = "N")]
    pub strokes: Option<usize>,

    #[arg(long, value_name = "I")]
    pub iters: Option<usize>,

    /// Augmented copies per iteration.
    #[arg(long, value_name = "D")]
    pub augments: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,

    /// `host:port` or `stdio:command args...`.
    #[arg(long, value_name = "ADDR")]
    pub service_addr: Option<String>,

    /// Per-request service timeout in seconds.
    #[arg(long, value_name = "SECONDS")]
    pub timeout: Option<f64>,

    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,

    #[arg(long)]
    pub no_augment: bool,

    /// Square canvas side in pixels.
    #[arg(long, value_name = "S")]
    pub canvas: Option<usize>,

    #[arg(long, value_name = "K")]
    pub snapshot_every: Option<usize>,

    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Comma-separated stroke counts, one run each.
    #[arg(long, value_name = "N,N,...", value_delimiter = ',')]
    pub sweep_strokes: Vec<usize>,

    /// Fit strokes to this image instead of a prompt.
    #[arg(long, value_name = "TARGET.png")]
    pub reconstruct: Option<PathBuf>,

    /// TOML config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Parallel runs during a sweep.
    #[arg(long, value_name = "W")]
    pub workers: Option<usize>,
}

/// The config file schema. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub prompts: Vec<String>,
    pub negatives: Vec<String>,
    pub negative_scale: Option<f64>,
    pub strokes: Option<usize>,
    pub iters: Option<usize>,
    pub augments: Option<usize>,
    pub seed: Option<u64>,
    pub backend: Option<BackendKind>,
    pub service_addr: Option<String>,
    pub timeout_s: Option<f64>,
    pub embedding_dim: Option<usize>,
    pub mode: Option<Mode>,
    pub augment: Option<bool>,
    pub canvas: Option<usize>,
    pub snapshot_every: Option<usize>,
    pub out: Option<PathBuf>,
    pub sweep_strokes: Vec<usize>,
    pub reconstruct: Option<PathBuf>,
    pub workers: Option<usize>,
    pub learning_rates: Option<LearningRates>,
    pub adam: Option<AdamConfig>,
    pub augmentation: Option<AugmentConfig>,
    pub raster: Option<RasterConfig>,
    pub width_bounds: Option<WidthBounds>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Everything a run needs, fully resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub backend: BackendKind,
    pub service_addr: Option<String>,
    pub timeout_s: f64,
    pub embedding_dim: usize,
    pub out: PathBuf,
    pub sweep_strokes: Vec<usize>,
    pub reconstruct: Option<PathBuf>,
    pub workers: usize,
}

fn prompt_spec(p: &Prompt) -> String {
    format!("{}:{}", p.text, p.weight)
}

impl Settings {
    /// A config file that resolves back to these settings.
    pub fn to_file_config(&self) -> FileConfig {
        let r = &self.run;
        FileConfig {
            prompts: r.prompts.positives.iter().map(prompt_spec).collect(),
            negatives: r.prompts.negatives.iter().map(prompt_spec).collect(),
            negative_scale: Some(r.prompts.negative_scale),
            strokes: Some(r.strokes),
            iters: Some(r.iterations),
            augments: Some(r.augment.n_copies),
            seed: Some(r.seed),
            backend: Some(self.backend),
            service_addr: self.service_addr.clone(),
            timeout_s: Some(self.timeout_s),
            embedding_dim: Some(self.embedding_dim),
            mode: Some(r.mode),
            augment: Some(r.augment_enabled),
            canvas: Some(r.canvas.width),
            snapshot_every: Some(r.snapshot_every),
            out: Some(self.out.clone()),
            sweep_strokes: self.sweep_strokes.clone(),
            reconstruct: self.reconstruct.clone(),
            workers: Some(self.workers),
            learning_rates: Some(r.learning_rates),
            adam: Some(r.adam),
            augmentation: Some(r.augment.clone()),
            raster: Some(r.raster),
            width_bounds: Some(r.width_bounds),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Merges defaults, `file`, flags, and the environment's service address.
pub fn resolve(
    args: &RunArgs,
    file: Option<FileConfig>,
    env_service_addr: Option<String>,
) -> Result<Settings, CliError> {
    let f = file.unwrap_or_default();
    let mut run = RunConfig::default();

    if let Some(a) = f.augmentation {
        run.augment = a;
    }
    if let Some(lr) = f.learning_rates {
        run.learning_rates = lr;
    }
    if let Some(adam) = f.adam {
        run.adam = adam;
    }
    if let Some(raster) = f.raster {
        run.raster = raster;
    }
    if let Some(wb) = f.width_bounds {
        run.width_bounds = wb;
    }

    let positives = if args.prompts.is_empty() { f.prompts } else { args.prompts.clone() };
    let negatives = if args.negatives.is_empty() { f.negatives } else { args.negatives.clone() };
    run.prompts = PromptSet {
        positives: positives.iter().map(|s| Prompt::parse(s)).collect(),
        negatives: negatives.iter().map(|s| Prompt::parse(s)).collect(),
        negative_scale: args.negative_scale.or(f.negative_scale).unwrap_or(run.prompts.negative_scale),
    };
    run.strokes = args.strokes.or(f.strokes).unwrap_or(run.strokes);
    run.iterations = args.iters.or(f.iters).unwrap_or(run.iterations);
    run.augment.n_copies = args.augments.or(f.augments).unwrap_or(run.augment.n_copies);
    run.seed = args.seed.or(f.seed).unwrap_or(run.seed);
    run.mode = args.mode.map(Mode::from).or(f.mode).unwrap_or(run.mode);
    run.augment_enabled = if args.no_augment { false } else { f.augment.unwrap_or(true) };
    if let Some(s) = args.canvas.or(f.canvas) {
        run.canvas = CanvasConfig::square(s)?;
    }
    run.snapshot_every = args.snapshot_every.or(f.snapshot_every).unwrap_or(0);

    let sweep_strokes = if args.sweep_strokes.is_empty() { f.sweep_strokes } else { args.sweep_strokes.clone() };
    let settings = Settings {
        backend: args.backend.or(f.backend).unwrap_or_default(),
        service_addr: args.service_addr.clone().or(f.service_addr).or(env_service_addr),
        timeout_s: args.timeout.or(f.timeout_s).unwrap_or(DEFAULT_TIMEOUT_S),
        embedding_dim: f.embedding_dim.unwrap_or(DEFAULT_EMBEDDING_DIM),
        out: args.out.clone().or(f.out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        reconstruct: args.reconstruct.clone().or(f.reconstruct),
        workers: args.workers.or(f.workers).unwrap_or(1),
        sweep_strokes,
        run,
    };
    check(&settings)?;
    Ok(settings)
}

fn check(s: &Settings) -> Result<(), CliError> {
    let run = &s.run;
    if run.iterations == 0 {
        return Err(usage("--iters must be at least 1"));
    }
    if s.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    if s.sweep_strokes.contains(&0) {
        return Err(usage("--sweep-strokes counts must be at least 1"));
    }
    if !(s.timeout_s.is_finite() && s.timeout_s > 0.0) {
        return Err(usage("--timeout must be positive"));
    }
    if s.reconstruct.is_some() {
        if run.mode == Mode::Pixels {
            return Err(usage("--reconstruct fits strokes; it cannot be combined with --mode pixels"));
        }
    } else {
        if run.prompts.positives.is_empty() {
            return Err(usage("at least one --prompt is required"));
        }
        run.prompts.validate()?;
        if s.backend == BackendKind::Service && s.service_addr.is_none() {
            return Err(usage(format!(
                "--backend service needs --service-addr or {}",
                vecsketch_core::protocol::SERVICE_ADDR_ENV
            )));
        }
    }
    if run.mode == Mode::Pixels && !s.sweep_strokes.is_empty() {
        return Err(usage("--sweep-strokes has no meaning with --mode pixels"));
    }
    run.validate()?;
    Ok(())
}
