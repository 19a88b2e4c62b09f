//! `gamma`: forge data, train, evaluate, sweep JPEG quality and run
//! ablation grids from one binary.
//!
//! Every command resolves its settings from flags and then an optional TOML
//! file (`--config`), whose values win. The resolved settings are written to
//! the output directory before any work starts.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure.

pub mod ablate;
pub mod commands;
pub mod settings;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gamma_core::datapipe::{AugmentPolicy, Split};
use gamma_core::evalkit::ReportFormat;
use gamma_core::forge::ForgeOp;
use gamma_core::model::ModelConfig;

pub use settings::{Settings, SNAPSHOT_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// A failed command with its exit status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn io(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<gamma_core::Error> for Failure {
    fn from(e: gamma_core::Error) -> Self {
        use gamma_core::Error as E;
        let code = match e {
            E::NonFinite { .. } => EXIT_NUMERIC,
            E::Config(_) | E::InvalidArgument(_) | E::UnknownFormat(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gamma", version, about = "Forgery-aware detector for AI-generated images")]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize forged samples, masks and a manifest.
    Forge(ForgeArgs),
    /// Train on a manifest with early stopping.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write reports.
    Eval(EvalArgs),
    /// Evaluate a checkpoint under JPEG re-encoding at several qualities.
    Sweep(EvalArgs),
    /// Train and evaluate one model per ablation cell.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML file whose values override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of authentic source images.
    #[arg(long, conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate this many synthetic authentic sources instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Number of samples (default: one per source).
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated ops: real, inpaint, blend, copymove, splice.
    #[arg(long, value_delimiter = ',', value_parser = parse_op)]
    pub ops: Option<Vec<ForgeOp>>,
    /// Synthetic source size, `N` or `WxH`.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<[u32; 2]>,
    #[arg(long)]
    pub jpeg_quality: Option<u8>,
    /// Snap edited regions to this pixel grid.
    #[arg(long)]
    pub region_grid: Option<u32>,
    /// Per-category fraction assigned to the test split.
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Desk,
    Micro,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, value_enum)]
    pub model: Option<Preset>,
    /// Toy model on 64-pixel crops.
    #[arg(long)]
    pub toy: bool,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of the training set drawn per epoch.
    #[arg(long)]
    pub epoch_fraction: Option<f64>,
    #[arg(long)]
    pub crop_size: Option<u32>,
    /// Per-category validation holdout when the manifest has no val split.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated report formats: text, delimited, plot.
    #[arg(long, value_delimiter = ',', value_parser = parse_format)]
    pub format: Option<Vec<ReportFormat>>,
    /// Comma-separated JPEG qualities for the robustness curve.
    #[arg(long, value_delimiter = ',')]
    pub qualities: Option<Vec<u8>>,
    /// Format-alignment quality.
    #[arg(long)]
    pub jpeg_quality: Option<u8>,
    /// Skip format alignment.
    #[arg(long)]
    pub no_align: bool,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long)]
    pub crop_size: Option<u32>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated grids (heads, labels, datasets, loss, attention);
    /// `key=cell` keeps a single cell.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<String>>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

fn parse_op(s: &str) -> Result<ForgeOp, String> {
    s.trim().parse().map_err(|e: gamma_core::Error| e.to_string())
}

fn parse_size(s: &str) -> Result<[u32; 2], String> {
    let parse = |t: &str| t.trim().parse::<u32>().map_err(|_| format!("bad size `{s}`"));
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok([parse(w)?, parse(h)?]),
        None => {
            let n = parse(s)?;
            Ok([n, n])
        }
    }
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.trim().parse().map_err(|e: gamma_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: gamma_core::Error| e.to_string())
}

fn common(s: &mut Settings, c: &CommonArgs, command: &str) {
    s.command = command.to_string();
    s.seed = c.seed;
    s.output_dir = c.out.clone();
    s.config_path = c.config.clone();
}

fn apply_train_flags(s: &mut Settings, f: &TrainFlags) {
    if f.toy {
        s.model = ModelConfig::toy();
        s.data.crop_size = 64;
    }
    if let Some(p) = f.model {
        s.model = match p {
            Preset::Toy => ModelConfig::toy(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Micro => ModelConfig::micro(),
        };
    }
    if let Some(v) = f.epochs {
        s.train.max_epochs = v;
    }
    if let Some(v) = f.batch_size {
        s.train.batch_size = v;
    }
    if let Some(v) = f.lr {
        s.train.learning_rate = v;
    }
    if let Some(v) = f.epoch_fraction {
        s.train.epoch_fraction = v;
    }
    if let Some(v) = f.crop_size {
        s.data.crop_size = v;
    }
    if let Some(v) = f.val_fraction {
        s.data.val_fraction = v;
    }
    if f.no_augment {
        s.data.augment = AugmentPolicy::disabled();
    }
    if let Some(v) = f.workers {
        s.train.workers = v;
    }
}

/// Flag-level settings of a parsed command line, before the config file.
pub fn flag_settings(command: &Command) -> Settings {
    let mut s = Settings::default();
    match command {
        Command::Forge(a) => {
            common(&mut s, &a.common, "forge");
            s.forge.input_dir = a.input.clone();
            s.forge.synthetic = a.synthetic.unwrap_or(0);
            s.forge.count = a.n;
            if let Some(ops) = &a.ops {
                s.forge.ops = ops.clone();
            }
            if let Some(size) = a.size {
                s.forge.size = size;
            }
            if let Some(q) = a.jpeg_quality {
                s.forge.options.jpeg_quality = q;
            }
            if let Some(g) = a.region_grid {
                s.forge.options.region_grid = g;
            }
            if let Some(f) = a.test_fraction {
                s.forge.test_fraction = f;
            }
        }
        Command::Train(a) => {
            common(&mut s, &a.common, "train");
            s.manifest = Some(a.manifest.clone());
            apply_train_flags(&mut s, &a.flags);
        }
        Command::Eval(a) | Command::Sweep(a) => {
            let sweep = matches!(command, Command::Sweep(_));
            common(&mut s, &a.common, if sweep { "sweep" } else { "eval" });
            s.manifest = Some(a.manifest.clone());
            s.checkpoint = Some(a.checkpoint.clone());
            if let Some(f) = &a.format {
                s.eval.formats = f.clone();
            }
            s.eval.qualities = match &a.qualities {
                Some(q) => q.clone(),
                None if sweep => settings::EvalSection::default_sweep(),
                None => Vec::new(),
            };
            if let Some(q) = a.jpeg_quality {
                s.eval.jpeg_quality = q;
            }
            s.eval.format_align = !a.no_align;
            s.eval.split = a.split;
            if let Some(c) = a.crop_size {
                s.data.crop_size = c;
            }
            if let Some(w) = a.workers {
                s.train.workers = w;
            }
        }
        Command::Ablate(a) => {
            common(&mut s, &a.common, "ablate");
            s.manifest = Some(a.manifest.clone());
            if let Some(g) = &a.grid {
                s.ablate.grids = g.clone();
            }
            apply_train_flags(&mut s, &a.flags);
        }
    }
    s
}

fn dispatch(settings: &Settings) -> Result<(), Failure> {
    match settings.command.as_str() {
        "forge" => commands::forge(settings).map(|_| ()),
        "train" => commands::train(settings).map(|_| ()),
        "eval" | "sweep" => commands::eval(settings).map(|_| ()),
        "ablate" => ablate::run(settings).map(|_| ()),
        other => Err(Failure::usage(format!("unknown command `{other}`"))),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    log::set_max_level(level);
    match flag_settings(&cli.command).resolve().and_then(|s| dispatch(&s)) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
