use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "regions", version, about = "Linear region discovery and absolute deviation along input-space paths")]
struct Cli {
    /// Worker threads for segment-level parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build paths and write anchor tensors plus an index.
    Paths(PathsArgs),
    /// Trace the linear regions crossed by every path segment.
    Discover(DiscoverArgs),
    /// Compute per-path absolute deviation from a trace.
    Deviation(DeviationArgs),
    /// Summarize deviation files as CSV.
    Stats(StatsArgs),
    /// Train small MLPs on synthetic 2-D data.
    Toy(ToyArgs),
}

#[derive(Args, Debug)]
pub struct PathsArgs {
    /// Image tensors (.rten) to translate along closed loops.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// JSON file with `shape`, `mean` and `std` for uniform noise images.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    /// JSON list of points; builds circles around each in the first two coordinates.
    #[arg(long)]
    pub centers: Option<PathBuf>,
    /// Build open chains of horizontal shifts instead of closed loops.
    #[arg(long)]
    pub open: bool,
    /// Largest shift in pixels for open paths.
    #[arg(long, default_value_t = 4)]
    pub shift_px: usize,
    #[arg(long, default_value_t = regions::paths::DEFAULT_RADIUS)]
    pub radius: f64,
    #[arg(long, default_value_t = regions::paths::DEFAULT_ANCHORS)]
    pub anchors: usize,
    /// Reflection padding in pixels (default: ceil(radius)).
    #[arg(long)]
    pub pad: Option<usize>,
    /// Number of noise paths.
    #[arg(long, default_value_t = regions::paths::DEFAULT_PATH_COUNT)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiscoverArgs {
    /// Model manifest (or stem shared by manifest and weights).
    #[arg(long)]
    pub model: PathBuf,
    /// Path index file or directory.
    #[arg(long)]
    pub paths: PathBuf,
    #[arg(long, default_value_t = regions::discovery::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = regions::discovery::DEFAULT_BATCH)]
    pub batch: usize,
    #[arg(long, default_value = "trace.jsonl")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DeviationArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub paths: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value = "dev.jsonl")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMetric {
    Ecdf,
    Spearman,
    Paired,
    Medians,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Measure {
    Deviation,
    Density,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Deviation JSON-lines files.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub metric: StatsMetric,
    /// Per-path measure used by ecdf and by spearman across two files.
    #[arg(long, value_enum, default_value = "deviation")]
    pub measure: Measure,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    #[command(subcommand)]
    pub action: ToyAction,
}

#[derive(Subcommand, Debug)]
pub enum ToyAction {
    /// Train one model and save it with its initialization.
    Train(ToyTrainArgs),
    /// Train one model per width and measure density and deviation.
    Sweep(ToySweepArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetArg {
    Spirals,
    Gaussians,
}

#[derive(Args, Debug)]
pub struct ToyCommon {
    #[arg(long, value_enum, default_value = "spirals")]
    pub dataset: DatasetArg,
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Fraction of labels resampled uniformly.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Stop once the training loss is below this value.
    #[arg(long)]
    pub loss_threshold: Option<f64>,
    /// Keep training after reaching 100% training accuracy.
    #[arg(long)]
    pub no_interpolation_stop: bool,
    /// Initial biases uniform in ±bias_scale/sqrt(fan_in); 0 gives zero biases.
    #[arg(long, default_value_t = 0.0)]
    pub bias_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ToyTrainArgs {
    #[command(flatten)]
    pub common: ToyCommon,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    pub hidden: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct ToySweepArgs {
    #[command(flatten)]
    pub common: ToyCommon,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    pub widths: Vec<usize>,
    /// Number of hidden layers.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    /// Size of the clean held-out set.
    #[arg(long, default_value_t = 1000)]
    pub test_n: usize,
    /// Closed paths around evenly spaced training points.
    #[arg(long, default_value_t = 64)]
    pub path_count: usize,
    #[arg(long, default_value_t = 0.5)]
    pub path_radius: f64,
    #[arg(long, default_value_t = regions::paths::DEFAULT_ANCHORS)]
    pub anchors: usize,
    #[arg(long, default_value_t = regions::discovery::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = regions::discovery::DEFAULT_BATCH)]
    pub batch: usize,
}

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(regions::Error),
}

impl From<regions::Error> for Failure {
    fn from(e: regions::Error) -> Self {
        Failure::Data(e)
    }
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ANOMALY: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REGIONS_LOG", "info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }

    let result = match &cli.command {
        Command::Paths(a) => commands::paths(a),
        Command::Discover(a) => commands::discover(a),
        Command::Deviation(a) => commands::deviation(a),
        Command::Stats(a) => commands::stats(a),
        Command::Toy(a) => match &a.action {
            ToyAction::Train(t) => commands::toy_train(t),
            ToyAction::Sweep(s) => commands::toy_sweep(s),
        },
    };

    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(anomalies) => {
            log::warn!("{anomalies} numeric anomalies (written to the output)");
            ExitCode::from(EXIT_ANOMALY)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
