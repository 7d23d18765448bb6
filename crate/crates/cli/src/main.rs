//! `emdl` command-line tool.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags or argument
//! values), 2 for data and validation errors.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "emdl", version, about = "Edge deployment toolkit for small CNN classifiers")]
pub struct Cli {
    /// Seed for random initialisation and random inputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads: a count `N` or, for `bench`, a range `A..B`.
    #[arg(long, global = true, env = "EMDL_THREADS")]
    pub threads: Option<ThreadSpec>,

    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print size, cost and layer summary of a model.
    Inspect {
        model: PathBuf,
    },
    /// Prune, cluster and quantize a model.
    Compress(CompressArgs),
    /// Measure inference latency across thread counts.
    Bench(BenchArgs),
    /// Evaluate a model on a labelled manifest.
    Eval(EvalArgs),
    /// Render a bench CSV as an SVG latency chart.
    Plot {
        csv: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Assemble a model from a JSON graph and a directory of RTEN tensors.
    Convert {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Build the MobileNetV2 reference model.
    #[command(name = "make-mobilenetv2")]
    MakeMobilenetV2(MakeArgs),
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Fraction of each eligible weight tensor to prune.
    #[arg(long, default_value_t = emdl::compress::DEFAULT_SPARSITY)]
    pub sparsity: f32,
    /// Codebook size for weight clustering (no clustering when absent).
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Post-training int8 quantization.
    #[arg(long)]
    pub quantize: bool,
    /// Calibration manifest (CSV).
    #[arg(long, conflicts_with = "calib_random")]
    pub calib: Option<PathBuf>,
    /// Number of seeded random calibration inputs.
    #[arg(long)]
    pub calib_random: Option<usize>,
    /// Cluster pruned zeros like any other value.
    #[arg(long)]
    pub no_preserve_zeros: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub model: PathBuf,
    #[arg(long, default_value_t = emdl::bench::DEFAULT_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = emdl::bench::DEFAULT_RUNS)]
    pub runs: usize,
    /// Write per-thread statistics as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Benchmark on this image or RTEN tensor instead of random input.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SubsetChoice {
    All,
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SubsetChoice::All)]
    pub subset: SubsetChoice,
    /// Write the confusion matrix of the first reported subset as CSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitChoice {
    Random,
    Zeros,
}

#[derive(Debug, Args)]
pub struct MakeArgs {
    #[arg(long, default_value_t = 7)]
    pub classes: usize,
    #[arg(long, default_value_t = 1.0)]
    pub width: f32,
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = InitChoice::Random)]
    pub init: InitChoice,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// `N` or an inclusive range `A..B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadSpec {
    pub start: usize,
    pub end: usize,
}

impl ThreadSpec {
    pub fn counts(self) -> Vec<usize> {
        (self.start..=self.end).collect()
    }

    pub fn single(self) -> Result<usize, CliError> {
        if self.start == self.end {
            Ok(self.start)
        } else {
            Err(CliError::Usage(format!("--threads {self}: this command takes a single thread count")))
        }
    }
}

impl fmt::Display for ThreadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.start == self.end {
            write!(f, "{}", self.start)
        } else {
            write!(f, "{}..{}", self.start, self.end)
        }
    }
}

impl FromStr for ThreadSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |v: &str| -> Result<usize, String> {
            match v.trim().parse::<usize>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(format!("invalid thread count '{v}'")),
            }
        };
        let (start, end) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.strip_prefix('=').unwrap_or(b))?),
            None => {
                let n = parse(s)?;
                (n, n)
            }
        };
        if start > end {
            return Err(format!("empty thread range '{s}'"));
        }
        Ok(ThreadSpec { start, end })
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    /// Stdout was closed by the reader (e.g. `| head`).
    Closed,
}

impl From<emdl::Error> for CliError {
    fn from(e: emdl::Error) -> Self {
        match e {
            emdl::Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            return CliError::Closed;
        }
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) | Err(CliError::Closed) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
