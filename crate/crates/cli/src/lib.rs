//! `kilnmap`: synthetic data, training, evaluation, inference, tile
//! expansion and map export from one binary.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 failure
//! while running (I/O, numeric breakdown, failed gradient check).

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use kilnmap_core::arch::Stem;
use kilnmap_core::dataset::{Augment, Split};
use kilnmap_core::export::Aggregation;
use kilnmap_core::geo::CoordMode;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "kilnmap",
    version,
    about = "Brick-kiln detection from satellite chips",
    args_override_self = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice (initialisation, shuffling, dropout, synthesis)
    #[arg(long, global = true, default_value_t = 0, display_order = 900)]
    pub seed: u64,
    /// Worker threads for batch-parallel kernels
    #[arg(long, global = true, default_value_t = 1, display_order = 901)]
    pub threads: usize,
    /// Suppress progress and summary messages on standard error
    #[arg(long, global = true, display_order = 902)]
    pub quiet: bool,
    /// File of key=value lines supplying defaults for long flags; flags given on the command line win
    #[arg(long, global = true, value_name = "PATH", display_order = 903)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic 11-class chip dataset with a manifest
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train a classifier on the train split, validating on the val split
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Kiln-vs-rest metrics of a checkpoint at one or more thresholds
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Class probabilities for every chip of a manifest
    #[command(args_override_self = true)]
    Infer(InferArgs),
    /// Learnable parameter count of a configuration, with a per-stage table
    #[command(name = "param-count", args_override_self = true)]
    ParamCount(ParamCountArgs),
    /// Finite-difference check of every layer's gradient
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Zoom-17 / zoom-20 tile utilities
    #[command(subcommand)]
    Tiles(TilesCommand),
    /// Heatmap rasters and detection GeoJSON from chip probabilities
    #[command(subcommand)]
    Export(ExportCommand),
}

#[derive(Debug, Subcommand)]
pub enum TilesCommand {
    /// Expand zoom-17 tiles into their 64 zoom-20 chips with coordinates
    #[command(args_override_self = true)]
    Expand(TilesExpandArgs),
}

#[derive(Debug, Subcommand)]
pub enum ExportCommand {
    /// One 8x8 PGM heatmap per zoom-17 parent tile
    #[command(args_override_self = true)]
    Heatmap(HeatmapArgs),
    /// GeoJSON FeatureCollection of chips at or above a kiln threshold
    #[command(args_override_self = true)]
    Geojson(GeojsonArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (receives manifest.csv and chips/)
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Chips per class
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Chip edge in pixels
    #[arg(long, default_value_t = 64)]
    pub chip_size: usize,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Block counts a,b,c of groups A, B and C
    #[arg(long, value_name = "A,B,C", value_parser = parse_blocks, default_value = "2,1,1")]
    pub blocks: [usize; 3],
    /// Channel width multiplier in (0, 1]
    #[arg(long, default_value_t = 0.25)]
    pub width: f64,
    /// Stem variant
    #[arg(long, value_enum, default_value_t = StemArg::Auto)]
    pub stem: StemArg,
    /// Scale applied to each residual branch
    #[arg(long, default_value_t = 0.1)]
    pub residual_scale: f64,
    /// Dropout rate before the classifier
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Output directory for best.ckpt, last.ckpt and train_log.csv
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Training epochs
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Mini-batch size
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// SGD learning rate
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// SGD momentum
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// L2 weight decay
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Also write last.ckpt every N epochs (0: only at the end)
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Training-time augmentation
    #[arg(long, value_enum, default_value_t = AugmentArg::Flip)]
    pub augment: AugmentArg,
    /// Record wall-clock seconds per epoch in the log (otherwise 0, keeping logs reproducible)
    #[arg(long)]
    pub record_time: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Dataset manifest
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Split to evaluate
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Comma-separated kiln probability thresholds in (0, 1)
    #[arg(long, value_delimiter = ',', default_value = "0.5", num_args = 1..)]
    pub thresholds: Vec<f64>,
    /// Metrics CSV to write (one row per threshold)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Inference batch size
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Trained checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Manifest listing the chips
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Restrict to one split
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Probabilities CSV to write
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Inference batch size
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct ParamCountArgs {
    /// Block counts a,b,c of groups A, B and C
    #[arg(long, value_name = "A,B,C", value_parser = parse_blocks, default_value = "10,3,3")]
    pub blocks: [usize; 3],
    /// Channel width multiplier in (0, 1]
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    /// Number of output classes
    #[arg(long, default_value_t = 11)]
    pub classes: usize,
    /// Input edge in pixels (affects only the per-stage shapes)
    #[arg(long, default_value_t = 299)]
    pub input_size: usize,
    /// Stem variant
    #[arg(long, value_enum, default_value_t = StemArg::Auto)]
    pub stem: StemArg,
    /// Also write the per-stage table as CSV
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random trials per op
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Also check the end-to-end loss gradient of a (1,1,1) width-0.125 network
    #[arg(long)]
    pub network: bool,
    /// Results CSV to write
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TilesExpandArgs {
    /// CSV of zoom-17 tiles with columns tile_x,tile_y (a zoom column, if present, must be 17)
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Zoom-20 chip CSV to write
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Coordinate convention for chip locations
    #[arg(long, value_enum, default_value_t = ModeArg::Mercator)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct ProbsArgs {
    /// Probabilities CSV as written by `infer` (needs zoom, tile_x, tile_y, p_brick_kiln)
    #[arg(long, value_name = "PATH")]
    pub probs: PathBuf,
    /// How repeated observations of one chip are combined
    #[arg(long, value_enum, default_value_t = AggregationArg::Max)]
    pub aggregation: AggregationArg,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub source: ProbsArgs,
    /// Output directory for heatmap_17_<x>_<y>.pgm files
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Treat chips absent from the CSV as probability 0 instead of failing
    #[arg(long)]
    pub fill_missing: bool,
}

#[derive(Debug, Args)]
pub struct GeojsonArgs {
    #[command(flatten)]
    pub source: ProbsArgs,
    /// GeoJSON file to write
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Minimum kiln probability for a detection
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Coordinate convention for detection points
    #[arg(long, value_enum, default_value_t = ModeArg::Mercator)]
    pub mode: ModeArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StemArg {
    Auto,
    Full,
    Desk,
}

impl From<StemArg> for Stem {
    fn from(s: StemArg) -> Self {
        match s {
            StemArg::Auto => Stem::Auto,
            StemArg::Full => Stem::Full,
            StemArg::Desk => Stem::Desk,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AugmentArg {
    None,
    Flip,
}

impl From<AugmentArg> for Augment {
    fn from(a: AugmentArg) -> Self {
        match a {
            AugmentArg::None => Augment::None,
            AugmentArg::Flip => Augment::Flip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Mercator,
    Paper,
}

impl From<ModeArg> for CoordMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mercator => CoordMode::Mercator,
            ModeArg::Paper => CoordMode::Paper,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Max,
    Mean,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Max => Aggregation::Max,
            AggregationArg::Mean => Aggregation::Mean,
        }
    }
}

fn parse_blocks(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated counts, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| format!("{p:?} is not a block count"))?;
    }
    Ok(out)
}

/// The clap command tree, for help rendering and introspection.
pub fn command() -> clap::Command {
    Cli::command()
}

/// A problem with the user's input; exits with status 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// Exit status for an error: 1 when any cause is a validation problem.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<kilnmap_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

/// Reads `key=value` lines; blank lines and `#` comments are skipped.
fn read_config(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Invalid(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        let k = k.trim().trim_start_matches("--");
        if k.is_empty() || k == "config" {
            return Err(Invalid(format!("{}:{}: invalid key {k:?}", path.display(), i + 1)).into());
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Inserts config entries as flags right after the subcommand path, so
/// that flags typed later on the command line override them.
fn merge_config(argv: &[OsString], cli: &Cli, entries: &[(String, String)]) -> Vec<OsString> {
    let path = subcommand_path(&cli.command);
    // Position just past the last subcommand token in argv.
    let mut at = 1;
    let mut want = path.iter().peekable();
    for (i, arg) in argv.iter().enumerate().skip(1) {
        if let Some(name) = want.peek() {
            if arg.to_str() == Some(**name) {
                want.next();
                at = i + 1;
            }
        }
    }
    let mut extra: Vec<OsString> = Vec::new();
    for (k, v) in entries {
        match v.as_str() {
            "true" => extra.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                extra.push(format!("--{k}").into());
                extra.push(v.into());
            }
        }
    }
    let mut out = argv[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[at..]);
    out
}

fn subcommand_path(command: &Command) -> Vec<&'static str> {
    match command {
        Command::Synth(_) => vec!["synth"],
        Command::Train(_) => vec!["train"],
        Command::Eval(_) => vec!["eval"],
        Command::Infer(_) => vec!["infer"],
        Command::ParamCount(_) => vec!["param-count"],
        Command::Gradcheck(_) => vec!["gradcheck"],
        Command::Tiles(TilesCommand::Expand(_)) => vec!["tiles", "expand"],
        Command::Export(ExportCommand::Heatmap(_)) => vec!["export", "heatmap"],
        Command::Export(ExportCommand::Geojson(_)) => vec!["export", "geojson"],
    }
}

fn parse(argv: &[OsString]) -> Result<Cli, i32> {
    let report = |e: clap::Error| {
        let code = if e.use_stderr() { 1 } else { 0 };
        let _ = e.print();
        code
    };
    let cli = Cli::try_parse_from(argv).map_err(report)?;
    let Some(config) = &cli.global.config else {
        return Ok(cli);
    };
    let entries = match read_config(config) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            return Err(1);
        }
    };
    Cli::try_parse_from(merge_config(argv, &cli, &entries)).map_err(report)
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(code) => return code,
    };
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}

/// The error chain joined with `: `, skipping causes whose text an
/// earlier message already includes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
