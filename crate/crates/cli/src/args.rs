use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use flowhn_core::bench::BenchOptions;
use flowhn_core::train::TrainConfig;
use flowhn_core::{ExecMode, ModelConfig, SplitMode};

use crate::config::DEFAULT_OUT_DIR;

#[derive(Parser, Debug)]
#[command(name = "flowhn", version, about = "Train, evaluate and benchmark parallel hybrid attention/SSM language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a byte-level corpus, writing metrics, checkpoints and an eval summary
    Train(TrainCmd),
    /// Evaluate a checkpoint on the held-out windows of a corpus
    Eval(EvalCmd),
    /// Measure training throughput and MFU per split mode
    Bench(BenchCmd),
    /// Print per-branch FLOP costs and the derived block size
    Flops(FlopsCmd),
    /// Print the token assignment of each block for a split mode
    Route(RouteCmd),
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML run configuration with [model], [train], [paths] and [bench] sections [default: none]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for initialization and data order; beats the config file and FLOWHN_SEED
    #[arg(long, value_name = "INT", default_value_t = 0)]
    pub seed: u64,

    /// Directory receiving the config snapshot and all artifacts
    #[arg(long, value_name = "DIR", default_value = DEFAULT_OUT_DIR)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Vocabulary size (byte-level corpora need 256)
    #[arg(long, value_name = "INT", default_value_t = ModelConfig::default().vocab_size)]
    pub vocab_size: usize,

    /// Model width
    #[arg(long, value_name = "INT", default_value_t = ModelConfig::default().d_model)]
    pub d_model: usize,

    /// Attention heads
    #[arg(long, value_name = "INT", default_value_t = ModelConfig::default().n_heads)]
    pub n_heads: usize,

    /// SSM inner width
    #[arg(long, value_name = "INT", default_value_t = ModelConfig::default().d_inner)]
    pub d_inner: usize,

    /// SSM state size per channel
    #[arg(long, value_name = "INT", default_value_t = ModelConfig::default().d_state)]
    pub d_state: usize,

    /// Number of parallel blocks
    #[arg(long, value_name = "INT", default_value_t = ModelConfig::default().n_blocks)]
    pub n_blocks: usize,

    /// Sequence length L (windows hold L + 1 bytes)
    #[arg(long, value_name = "INT", default_value_t = ModelConfig::default().seq_len)]
    pub seq_len: usize,

    /// Token split: no_split, ae, fa or fac
    #[arg(long, value_name = "MODE", default_value_t = ModelConfig::default().split_mode)]
    pub split_mode: SplitMode,

    /// Branch execution: parallel or serial
    #[arg(long, value_name = "EXEC", default_value_t = ModelConfig::default().exec_mode)]
    pub exec: ExecMode,

    /// Feed-forward sublayer after fusion
    #[arg(long, value_name = "BOOL", default_value_t = ModelConfig::default().ffn, action = ArgAction::Set)]
    pub ffn: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Peak learning rate
    #[arg(long, value_name = "REAL", default_value_t = TrainConfig::default().peak_lr)]
    pub peak_lr: f64,

    /// AdamW beta1
    #[arg(long, value_name = "REAL", default_value_t = TrainConfig::default().beta1)]
    pub beta1: f64,

    /// AdamW beta2
    #[arg(long, value_name = "REAL", default_value_t = TrainConfig::default().beta2)]
    pub beta2: f64,

    /// Decoupled weight decay
    #[arg(long, value_name = "REAL", default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,

    /// Fraction of steps spent in linear warmup
    #[arg(long, value_name = "REAL", default_value_t = TrainConfig::default().warmup_fraction)]
    pub warmup_fraction: f64,

    /// Applied optimizer steps
    #[arg(long, value_name = "INT", default_value_t = TrainConfig::default().total_steps)]
    pub total_steps: usize,

    /// Windows per micro-batch
    #[arg(long, value_name = "INT", default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,

    /// Micro-batches per applied step
    #[arg(long, value_name = "INT", default_value_t = TrainConfig::default().grad_accum)]
    pub grad_accum: usize,

    /// Global gradient-norm clip, 0 disables
    #[arg(long, value_name = "REAL", default_value_t = TrainConfig::default().grad_clip)]
    pub grad_clip: f64,

    /// Checkpoint interval in applied steps, 0 keeps only the final one
    #[arg(long, value_name = "INT", default_value_t = TrainConfig::default().checkpoint_every)]
    pub checkpoint_every: usize,

    /// Fraction of windows held out for evaluation
    #[arg(long, value_name = "REAL", default_value_t = TrainConfig::default().eval_fraction)]
    pub eval_fraction: f64,

    /// Device peak FLOP/s used for the mfu metric [default: none]
    #[arg(long, value_name = "REAL")]
    pub peak_flops: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: Common,

    /// Raw text corpus, read as bytes [default: none]
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,

    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[command(flatten)]
    pub common: Common,

    /// Raw text corpus, read as bytes [default: none]
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,

    /// Checkpoint to evaluate [default: latest under <out-dir>/checkpoints]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Fraction of windows held out for evaluation
    #[arg(long, value_name = "REAL", default_value_t = TrainConfig::default().eval_fraction)]
    pub eval_fraction: f64,

    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct BenchCmd {
    #[command(flatten)]
    pub common: Common,

    /// Comma-separated split modes to measure
    #[arg(long, value_name = "MODES", value_delimiter = ',', default_value = "no_split,ae,fa,fac")]
    pub modes: Vec<SplitMode>,

    /// Device peak FLOP/s, required here or as bench.peak_flops [default: none]
    #[arg(long, value_name = "REAL")]
    pub peak_flops: Option<f64>,

    /// Discarded iterations before timing
    #[arg(long, value_name = "INT", default_value_t = BenchOptions::default().warmup_iters)]
    pub warmup_iters: usize,

    /// Timed forward+backward iterations
    #[arg(long, value_name = "INT", default_value_t = BenchOptions::default().timed_iters)]
    pub timed_iters: usize,

    /// Sequences per timed iteration
    #[arg(long, value_name = "INT", default_value_t = BenchOptions::default().batch_size)]
    pub bench_batch_size: usize,

    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct FlopsCmd {
    #[command(flatten)]
    pub common: Common,

    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct RouteCmd {
    #[command(flatten)]
    pub common: Common,

    /// Split mode to trace
    #[arg(long, value_name = "MODE", default_value_t = SplitMode::FACSplit)]
    pub mode: SplitMode,

    /// Sequence length
    #[arg(long, value_name = "INT", default_value_t = ModelConfig::default().seq_len)]
    pub seq_len: usize,

    /// Number of blocks to trace
    #[arg(long, value_name = "INT", default_value_t = ModelConfig::default().n_blocks)]
    pub blocks: usize,

    /// Attention-to-SSM FLOP ratio F_a / F_s [default: from the model FLOP profile]
    #[arg(long, value_name = "REAL")]
    pub flop_ratio: Option<f64>,

    /// Explicit SSM block size [default: from the FLOP ratio]
    #[arg(long, value_name = "INT")]
    pub block_size: Option<usize>,

    /// Number tokens from 1 instead of 0
    #[arg(long, value_name = "BOOL", default_value_t = false, action = ArgAction::Set)]
    pub one_based: bool,
}
