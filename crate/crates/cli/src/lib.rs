//! The `hyperfm` command line: synthetic data, preprocessing, pretraining,
//! finetuning, inference, evaluation and the parameter/timing benchmark.
//!
//! Every command that produces output also writes a run manifest echoing the
//! resolved configuration, the seed and the SHA-256 of each input file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hyperfm::downstream::FinetuneMode;
use hyperfm::Result;
use hyperfm_datapipe::tiles::NanScope;

pub mod data;
pub mod manifest;
pub mod train;

#[derive(Debug, Parser)]
#[command(name = "hyperfm", version, about = "Parameter-efficient hyperspectral foundation model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded synthetic L1B/L2 granule pairs.
    Synth(SynthArgs),
    /// Mask, pair and tile granules; write the split manifest and channel statistics.
    Preprocess(PreprocessArgs),
    /// Masked-autoencoder pretraining on the train split.
    Pretrain(PretrainArgs),
    /// Cloud-property finetuning from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Patchwise retrieval over a whole L1B granule.
    Infer(InferArgs),
    /// Per-task MSE of predictions against L2 targets.
    Eval(EvalArgs),
    /// Parameter counts, compression ratios, complexity estimates and block timings.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of granule pairs.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0.6)]
    pub cloud_fraction: f64,
    #[arg(long, default_value_t = 192)]
    pub height: usize,
    #[arg(long, default_value_t = 192)]
    pub width: usize,
    /// Band profile as `blue,red,swir`; PACE OCI (119,163,9) by default.
    #[arg(long, value_parser = parse_bands)]
    pub bands: Option<[usize; 3]>,
    #[arg(long, default_value_t = 0.002)]
    pub flag_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub l1b_dir: PathBuf,
    #[arg(long)]
    pub l2_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = hyperfm_datapipe::tiles::WINDOW)]
    pub window: usize,
    /// Defaults to the window side.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = hyperfm_datapipe::tiles::T_NAN)]
    pub t_nan: f64,
    #[arg(long, default_value_t = hyperfm_datapipe::matching::DELTA_T)]
    pub delta_t: i64,
    /// Planes the NaN threshold is measured over: `input` or `combined`.
    #[arg(long, default_value = "input", value_parser = parse_scope)]
    pub nan_scope: NanScope,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Run configuration (JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory of `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained checkpoint; training starts from the seeded initialization without it.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// `decoder_only` or `full`.
    #[arg(long, default_value = "full")]
    pub mode: FinetuneMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Finetuned checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// L1B granule file.
    #[arg(long)]
    pub scene: PathBuf,
    /// Prediction granule to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction granules, paired in order with `--target`.
    #[arg(long, num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    /// L2 granules.
    #[arg(long, num_args = 1.., required = true)]
    pub target: Vec<PathBuf>,
    /// Checkpoint whose target transforms define the transformed space.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Report file (JSON); a `.tsv` twin is written beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Skip the forward-time measurements.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [192, 384, 768, 1536])]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn parse_bands(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected blue,red,swir".to_string())
}

fn parse_scope(s: &str) -> std::result::Result<NanScope, String> {
    match s {
        "input" => Ok(NanScope::Input),
        "combined" => Ok(NanScope::Combined),
        other => Err(format!("unknown NaN scope {other:?}")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => data::synth(&a),
        Command::Preprocess(a) => data::preprocess(&a),
        Command::Pretrain(a) => train::pretrain(&a),
        Command::Finetune(a) => train::finetune(&a),
        Command::Infer(a) => train::infer(&a),
        Command::Eval(a) => train::eval(&a),
        Command::Bench(a) => train::bench(&a),
    }
}
