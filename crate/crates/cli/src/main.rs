use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{Guide, Preset};

/// Guided thermal super-resolution: synthesis, training, inference,
/// evaluation, gradient checks and guide-dropout sweeps.
///
/// Exit status is 0 on success, 1 for invalid arguments or inputs and 2 for
/// failures during computation. SFSR_THREADS caps the worker thread count.
#[derive(Parser, Debug)]
#[command(name = "sfsr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (ir_hr/, ir_lr/, rgb/ PNG files).
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a CSV report.
    Train(TrainArgs),
    /// Super-resolve one IR image.
    Infer(InferArgs),
    /// Report PSNR/SSIM of a checkpoint and the bicubic baseline.
    Eval(EvalArgs),
    /// Compare tape gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one model per guide-dropout probability and tabulate the
    /// guided/unguided metrics.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    pub n: usize,
    /// High-resolution size as HxW; both must be multiples of the scale.
    #[arg(long, default_value = "128x128")]
    pub size: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// IR bit depth (8 or 16); RGB is always 8-bit.
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}

/// Model and training configuration. Later sources win: preset, then
/// `--config`, then `--set`, then the dedicated flags.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Base configuration (ignored when resuming).
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// File of key=value lines; `#` starts a comment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr_high=1e-3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Residual groups per shallow branch.
    #[arg(long)]
    pub n_stl: Option<usize>,
    /// Fusion blocks.
    #[arg(long)]
    pub n_acf: Option<usize>,
    /// Reconstruction residual groups.
    #[arg(long)]
    pub n_rec: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Guide drop probability during training.
    #[arg(long)]
    pub p_th: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// HR training patch size.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Guide representation; defaults to what guide_channels implies.
    #[arg(long, value_enum)]
    pub guide: Option<Guide>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation dataset root (defaults to the training set).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Run directory for the report, metadata and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print only evaluated epochs.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Low-resolution IR image.
    #[arg(long)]
    pub ir: PathBuf,
    /// Guide image, or `none` for unguided inference with a zero guide.
    #[arg(long)]
    pub rgb: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Output bit depth (8 or 16).
    #[arg(long, default_value_t = 8)]
    pub bits: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Guided,
    Unguided,
    Both,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    pub mode: ModeArg,
    /// Also write the metrics as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Op,
    Model,
    All,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Level::Op)]
    pub level: Level,
    /// Coordinates probed per parameter tensor at model level.
    #[arg(long, default_value_t = 6)]
    pub coords: usize,
    /// Replace every check's tolerance with this bound.
    #[arg(long)]
    pub max_rel_err: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Directory for per-run subdirectories and sweep.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated guide drop probabilities.
    #[arg(long, default_value = "0,0.1,0.2,0.3,0.5")]
    pub p_th_list: String,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SFSR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SFSR_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot configure {n} threads: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let res = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
