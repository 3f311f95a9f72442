mod commands;
mod config;
mod run;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use afcyte::extraction::{otsu, particles, registration, watershed};
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::run::{CliError, CliResult};

/// Label-free immune cell classification from autofluorescence images.
#[derive(Debug, Parser)]
#[command(name = "afcyte", version, propagate_version = true)]
struct Cli {
    /// key = value file supplying defaults; command-line flags win
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Increase log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic fields of view or patch datasets
    Synth(SynthArgs),
    /// Segment cells and write labelled 64x64 patches with a manifest
    Extract(ExtractArgs),
    /// Cross-validated training with per-fold checkpoints and metrics
    Train(TrainArgs),
    /// Score a trained fold on a patch manifest
    Eval(EvalArgs),
    /// Spatial, capacity or channel perturbation sweep
    Perturb(PerturbArgs),
    /// Re-render the report of a finished train, eval or perturb run
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// patches: labelled 64x64 patches; fov: full images for extraction
    #[arg(long, default_value = "patches", value_parser = ["patches", "fov"])]
    mode: String,
    /// Patch appearance preset
    #[arg(long, default_value = "binary", value_parser = ["binary", "center", "multiclass"])]
    preset: String,
    /// Patches per class (patches mode)
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    /// Sensor noise level
    #[arg(long, default_value = "low", value_parser = ["low", "high"])]
    noise: String,
    /// Number of images (fov mode)
    #[arg(long, default_value_t = 1)]
    fovs: usize,
    /// Cells per image (fov mode)
    #[arg(long, default_value_t = 50)]
    cells: usize,
    /// Image side length in pixels (fov mode)
    #[arg(long, default_value_t = 1024)]
    size: usize,
    /// Truth labels written for fov mode: apc (positive/negative) or class
    #[arg(long, default_value = "apc", value_parser = ["apc", "class"])]
    labels: String,
    /// Horizontal misregistration of the APC plane (fov mode)
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    apc_shift_x: i32,
    /// Vertical misregistration of the APC plane (fov mode)
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    apc_shift_y: i32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Input images (multi-page TIFF or AFIM)
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory for patches/ and manifest.csv
    #[arg(long)]
    out: PathBuf,
    /// Channel name of each TIFF page in order, e.g. NADH,FAD,DODT,APC
    #[arg(long)]
    channel_map: Option<String>,
    /// Channels stacked into each patch
    #[arg(long, default_value = "NADH,FAD,DODT")]
    patch_channels: String,
    /// Channel used for segmentation
    #[arg(long, default_value = "NADH")]
    segmentation_channel: String,
    /// apc, or class:NAME to give every patch one label
    #[arg(long, default_value = "apc")]
    label: String,
    /// Minimum particle area in pixels
    #[arg(long, default_value_t = particles::DEFAULT_MIN_AREA)]
    min_area: usize,
    #[arg(long, default_value_t = particles::DEFAULT_CIRCULARITY.0)]
    circularity_min: f64,
    #[arg(long, default_value_t = particles::DEFAULT_CIRCULARITY.1)]
    circularity_max: f64,
    /// Largest foreground fraction before the threshold is raised
    #[arg(long, default_value_t = otsu::DEFAULT_BRIGHT_CAP)]
    bright_cap: f64,
    /// Watershed marker depth in distance-transform pixels
    #[arg(long, default_value_t = watershed::DEFAULT_H)]
    watershed_h: f64,
    /// Registration search radius in pixels
    #[arg(long, default_value_t = registration::DEFAULT_MAX_SHIFT)]
    max_shift: usize,
    /// Correlation below which registration is flagged and not applied
    #[arg(long, default_value_t = registration::DEFAULT_MIN_SCORE)]
    min_registration_score: f64,
    /// Diameter of the central disk read for APC labelling
    #[arg(long, default_value_t = 20.0)]
    apc_diameter: f64,
    /// Manual threshold for one image, as SOURCE_ID=VALUE (repeatable)
    #[arg(long, action = ArgAction::Append)]
    threshold_override: Vec<String>,
}

/// Training hyperparameters. Unset values take the task default.
#[derive(Debug, Clone, Args)]
struct HpArgs {
    /// binary or multiclass
    #[arg(long, default_value = "binary", value_parser = ["binary", "multiclass"])]
    task: String,
    /// Training epochs [default: 300]
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate of the cosine schedule [default: 5e-6]
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [default: 16 binary, 32 multiclass]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Dropout before the classifier [default: 0.1]
    #[arg(long)]
    dropout: Option<f64>,
    /// Label smoothing [default: 0 binary, 0.2 multiclass]
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Decoupled weight decay [default: 0.001 binary, 0.0005 multiclass]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Augmentation probability [default: 0.6 binary, 0 multiclass]
    #[arg(long)]
    augment_p: Option<f64>,
    /// Fraction of epochs before weight averaging starts [default: 0.75]
    #[arg(long)]
    swa_start: Option<f64>,
    /// Gaussian blur sigma applied to every patch [default: 2]
    #[arg(long)]
    blur_sigma: Option<f64>,
    /// Inverse-frequency class weights in the loss [default: false]
    #[arg(long)]
    class_weighting: Option<bool>,
    /// Decision threshold on the positive-class probability [default: 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// Metric averaging: binary, macro or weighted [default: binary, macro for multiclass]
    #[arg(long)]
    average: Option<String>,
    /// Cross-validation folds [default: 5]
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Patch manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hp: HpArgs,
    /// Input channels: nadh_only, fad_only, dodt_only, nadh_fad or all
    #[arg(long, default_value = "all")]
    channels: String,
    /// none, keep_inside or keep_outside
    #[arg(long, default_value = "none")]
    mask_mode: String,
    /// Mask diameter in pixels
    #[arg(long, default_value_t = 20.0)]
    mask_diameter: f64,
    /// Fire modules left trainable, counted from the input side
    #[arg(long, default_value_t = 8)]
    unfrozen_fires: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// A fold directory written by train
    #[arg(long)]
    fold_dir: PathBuf,
    /// Patch manifest to score
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// spatial, capacity or channel
    #[arg(long, value_parser = ["spatial", "capacity", "channel"])]
    kind: String,
    /// Mask diameters for the spatial sweep
    #[arg(long, default_value = "5,20,40,60")]
    diameters: String,
    /// Unfrozen fire counts for the capacity sweep
    #[arg(long, default_value = "0,1,2,3,4,5,6,7,8")]
    unfrozen: String,
    /// Channel configurations for the channel sweep
    #[arg(long, default_value = "nadh_only,fad_only,dodt_only,nadh_fad,all")]
    channel_configs: String,
    #[command(flatten)]
    hp: HpArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directory
    #[arg(long)]
    run: PathBuf,
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("AFCYTE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("AFCYTE_THREADS must be a positive integer, found '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::runtime(e.to_string()))
}

fn run() -> CliResult<()> {
    let raw: Vec<String> = std::env::args().collect();
    let root = Cli::command();
    let names: BTreeSet<String> = root.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let (config, sub) = config::scan(&raw, &names);
    let mut from_file = BTreeSet::new();
    let args = match (config, sub) {
        (Some(path), Some(i)) => {
            let text = run::read_to_string(std::path::Path::new(&path))?;
            let entries = config::parse(&text).map_err(|e| CliError::usage(format!("{path}:\n  {}", e.join("\n  "))))?;
            let inj = config::inject(&root, &raw, &entries, i).map_err(|e| CliError::usage(format!("{path}:\n  {}", e.join("\n  "))))?;
            from_file = inj.from_file;
            inj.args
        }
        _ => raw,
    };
    let matches = root.try_get_matches_from(&args).unwrap_or_else(|e| e.exit());
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());

    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    init_threads()?;

    let (name, sub_matches) = matches.subcommand().expect("subcommand required");
    let ctx = commands::Context::new(name, sub_matches, &from_file);
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Extract(a) => commands::extract(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Perturb(a) => commands::perturb(&ctx, a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.category.exit_code() as u8)
        }
    }
}
