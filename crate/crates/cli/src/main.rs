//! `qntz`: ternary/8-bit quantization toolkit.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

mod commands;
mod run_manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "qntz", version, about = "Cluster-based ternary weight quantization with 8-bit activations")]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "QNTZ_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Graph manifest (text).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Tensor container with the weights.
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct OutModel {
    /// Output graph manifest.
    #[arg(long)]
    pub out_manifest: PathBuf,
    /// Output tensor container.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct QuantArgs {
    /// Filters per cluster (one shared scale each), or `all` for one
    /// cluster per layer.
    #[arg(long, short = 'n', default_value = "4", value_parser = parse_cluster_size)]
    pub cluster_size: ClusterSize,
    /// Bits per weight below 8: 2 (ternary) or 4.
    #[arg(long, default_value_t = 2, value_parser = parse_weight_bits)]
    pub weight_bits: u8,
    /// Also quantize fully connected layers (they keep 8-bit weights by default).
    #[arg(long)]
    pub quantize_fc: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSize {
    Filters(usize),
    All,
}

fn parse_cluster_size(s: &str) -> Result<ClusterSize, String> {
    if s == "all" || s == "d" {
        return Ok(ClusterSize::All);
    }
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(ClusterSize::Filters(n)),
        _ => Err(format!("`{s}` is not a positive integer or `all`")),
    }
}

fn parse_weight_bits(s: &str) -> Result<u8, String> {
    match s {
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err(format!("`{s}` is not supported; use 2 (ternary) or 4")),
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Float,
    Quant,
    Int,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Quantize conv/fc weights into clustered ternary (or 4-bit) codes.
    Quantize {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        quant: QuantArgs,
        #[command(flatten)]
        out: OutModel,
        /// Calibration data: recompute batch norm and calibrate activation
        /// formats so the output runs in integer mode.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Labelled data to report integer-mode accuracy on (needs --calib).
        #[arg(long, requires = "calib")]
        eval: Option<PathBuf>,
        /// Write the per-layer error report (and accuracy) as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Recompute batch-norm statistics and choose 8-bit activation formats.
    Calibrate {
        #[command(flatten)]
        model: ModelArgs,
        /// Data container with `input.<i>` batches.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutModel,
        /// Keep the stored batch-norm statistics.
        #[arg(long)]
        no_bn_recompute: bool,
    },
    /// Run a model over a data container.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Data container with `input.<i>` batches (and optional `label.<i>`).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Float)]
        mode: ModeArg,
        /// Output container (`output.<i>` records).
        #[arg(long)]
        out: PathBuf,
        /// Also write every layer's output as `act.<layer>` records.
        #[arg(long)]
        dump_activations: bool,
        /// Print the top-k classes of every sample.
        #[arg(long)]
        top_k: Option<usize>,
        /// Write op counts (integer mode) and accuracy as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Count multiplies and accumulations, and the share of multiplies replaced.
    Analyze {
        /// Graph manifest (weights are not needed).
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fine-tune a float toy model with quantized forward passes.
    Finetune {
        #[command(flatten)]
        model: ModelArgs,
        /// Labelled training data.
        #[arg(long)]
        data: PathBuf,
        /// Labelled evaluation data.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[command(flatten)]
        quant: QuantArgs,
        /// Leading training samples used for calibration.
        #[arg(long, default_value_t = 256)]
        calibration: usize,
        #[command(flatten)]
        out: OutModel,
        /// Accuracy curve as CSV (`epoch,loss,accuracy`).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Merge `quantize --json` artifacts into one table.
    Report {
        artifacts: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print a markdown table instead of aligned text.
        #[arg(long)]
        markdown: bool,
    },
    /// Generate the synthetic task and train a float toy model.
    Toy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        epochs: usize,
        #[arg(long, default_value_t = 16000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
