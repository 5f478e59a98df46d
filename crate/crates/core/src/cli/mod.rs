//! The `vadd` command line.
//!
//! Every subcommand also accepts `--config FILE`, a text file of
//! `key = value` lines naming long flags (`hidden = 64`, `greedy = true`).
//! Flags given on the command line win over the file.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::decoder::ModelVariant;
use crate::error::Error;
use crate::textdata::Split;

pub use config::expand_config;

#[derive(Debug, Parser)]
#[command(name = "vadd", version, about = "Dual-stream video captioning: data, training, decoding and evaluation")]
#[command(args_override_self = true)]
pub struct Cli {
    /// `key = value` file supplying default flag values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (manifest plus feature files).
    GenSynth(GenSynthArgs),
    /// Build a vocabulary from the training split of a manifest.
    BuildVocab(BuildVocabArgs),
    /// Train a model, writing checkpoints and logs to --out.
    Train(TrainCmdArgs),
    /// Decode a split and score it.
    Eval(EvalArgs),
    /// Caption individual feature files.
    Caption(CaptionArgs),
    /// Evaluate over a grid of lambda (retraining) or gamma values.
    Sweep(SweepArgs),
    /// Compare analytic gradients with finite differences on small models.
    Gradcheck(GradcheckArgs),
    /// Convert per-frame motion and appearance text dumps into a feature file.
    ConvertFeatures(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub videos: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Events per video.
    #[arg(long, default_value_t = 2)]
    pub events: usize,
    /// Number of distinct event types.
    #[arg(long, default_value_t = 10)]
    pub alphabet: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 2)]
    pub paraphrases: usize,
    #[arg(long, default_value_t = 2)]
    pub frames_per_event: usize,
    /// Width of each modality; frames hold twice this many values.
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep words seen at least this many times.
    #[arg(long, default_value_t = 2)]
    pub threshold: usize,
}

/// Model and optimization flags shared by `train` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Vocabulary file; built from the training split (threshold 2) when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "vadd")]
    pub variant: ModelVariant,
    /// Weight of the self-forcing loss [default: 0.8].
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Divide the learning rate by --decay-factor every this many epochs.
    #[arg(long, default_value_t = 5)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 3.0)]
    pub decay_factor: f64,
    /// Global gradient-norm clip.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Train on only the first N captions of each video.
    #[arg(long)]
    pub captions_per_video: Option<usize>,
    /// Let the self-forcing stream reuse the teacher-forced stream's
    /// attention and track weights.
    #[arg(long)]
    pub share_va: bool,
}

#[derive(Debug, Args)]
pub struct TrainCmdArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the newest checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
    /// Skip the per-epoch validation decode.
    #[arg(long)]
    pub no_val: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stream {
    Mixed,
    Tf,
    Sf,
}

/// Decoding flags shared by `eval`, `caption` and `sweep`.
#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// TF/SF mixing weight for dual-stream models [default: 0.7].
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long)]
    pub greedy: bool,
    /// Which distribution drives decoding of a dual-stream model.
    #[arg(long, value_enum, default_value_t = Stream::Mixed)]
    pub stream: Stream,
    #[arg(long, default_value_t = 20)]
    pub max_len: usize,
    /// Rank finished beams by total instead of mean log-probability.
    #[arg(long)]
    pub no_length_norm: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file, or a training directory (newest checkpoint).
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to `vocab.txt` next to the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Also write the report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Feature files to caption.
    #[arg(long, required = true, num_args = 1..)]
    pub features: Vec<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Lambda,
    Gamma,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated grid, e.g. 0.4,0.6,0.8.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Trained checkpoint (gamma sweeps).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: Split,
    /// Write `value,bleu4,rouge_l,cider` rows here.
    #[arg(long)]
    pub emit_curves: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Defaults to all four variants.
    #[arg(long)]
    pub variant: Option<ModelVariant>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Check seeds `seed..seed+seeds`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 12)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 6)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Motion features, one frame per line, values separated by commas or
    /// whitespace.
    #[arg(long)]
    pub motion: PathBuf,
    /// Appearance features in the same layout; same frame count and width.
    #[arg(long)]
    pub appearance: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Resample to this many frames; 0 keeps the input count.
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
}

/// An error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFiniteLoss { .. } => Self::check(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code: 0 success, 1 failed check, 2 usage or validation error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
