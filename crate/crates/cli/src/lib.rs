//! Command-line driver: `train`, `quantize`, `eval`, `cost` and `sweep`.
//!
//! Exit codes: 0 success, 2 bad configuration or usage, 3 any other failure.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use shiftquant::train::{RegCoefficients, Scheme, ThresholdScope, ThresholdSum};
use shiftquant::{Error, Result};

use commands::{CostTarget, QuantizeOptions, SweepOptions};
use config::RunConfig;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "shiftquant", version, about = "Flexible power-of-two CNN quantization")]
pub struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, model file and manifest.
    Train(TrainArgs),
    /// Quantize a trained float model and calibrate the integer engine.
    Quantize(QuantizeArgs),
    /// Test-split accuracy of a model file.
    Eval(EvalArgs),
    /// Storage and operation counts of a model file or preset.
    Cost(CostArgs),
    /// Train over a grid of second-term regularizer strengths and seeds.
    Sweep(SweepArgs),
}

/// Flags that override the run configuration file.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum terms per filter.
    #[arg(long)]
    pub k: Option<usize>,
    /// Regularizer coefficients, one per term.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub lambda: Option<Vec<f64>>,
    /// Sigmoid temperature of the threshold gradient.
    #[arg(long)]
    pub tau: Option<f64>,
    /// flexible, fixed or full-precision.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub threshold_init: Option<f64>,
    /// One threshold vector per weight layer instead of one shared vector.
    #[arg(long)]
    pub per_layer_thresholds: bool,
    /// Sum threshold gradients over fired rounds only.
    #[arg(long)]
    pub fired_count_sum: bool,
    /// Global gradient-norm clip (0 disables).
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record wall-clock time per epoch.
    #[arg(long)]
    pub timing: bool,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(p) = &self.preset {
            cfg.network = config::NetworkSource { preset: Some(p.clone()), inline: None };
        }
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = &self.scheme {
            t.scheme = v.parse::<Scheme>()?;
        }
        if let Some(v) = self.k {
            t.k = v;
            if self.lambda.is_none() && t.lambda.len() != v {
                t.lambda = RegCoefficients::zeros(v);
            }
        }
        if let Some(v) = &self.lambda {
            t.lambda = RegCoefficients::new(v.clone())?;
        }
        if let Some(v) = self.tau {
            t.tau = v;
        }
        if let Some(v) = self.threshold_init {
            t.threshold_init = v;
        }
        if self.per_layer_thresholds {
            t.threshold_scope = ThresholdScope::PerLayer;
        }
        if self.fired_count_sum {
            t.threshold_sum = ThresholdSum::FiredCount;
        }
        if let Some(v) = self.clip_norm {
            t.clip_norm = v;
        }
        if let Some(v) = &self.out {
            cfg.output.dir = v.clone();
        }
        if self.timing {
            cfg.output.timing = true;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: Overrides,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Run configuration supplying the data.
    #[arg(long)]
    pub config: PathBuf,
    /// Float model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Quantized model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the term budget (required for full-precision models).
    #[arg(long)]
    pub k: Option<usize>,
    /// Override the learned thresholds with one shared vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Also write the report here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, conflicts_with = "preset")]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    pub preset: Option<String>,
    /// Uniform term budget for a preset; omitted means the float baseline.
    #[arg(long, requires = "preset")]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub code_bits: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: Overrides,
    /// First-term regularizer coefficient, shared by all cells.
    #[arg(long, default_value_t = 0.0)]
    pub lambda0: f64,
    /// Second-term coefficients to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambda1: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    /// Also train fixed k = 1 and k = 2 models for each seed.
    #[arg(long)]
    pub baselines: bool,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Train(a) => commands::train(&a.run.resolve()?),
        Command::Quantize(a) => commands::quantize(
            &RunConfig::load(&a.config)?,
            &QuantizeOptions { model: a.model, out: a.out, k: a.k, thresholds: a.thresholds },
        ),
        Command::Eval(a) => commands::eval(&RunConfig::load(&a.config)?, &a.model, a.out.as_deref()),
        Command::Cost(a) => {
            let target = match (a.model, a.preset) {
                (Some(m), _) => CostTarget::Model(m),
                (None, Some(name)) => CostTarget::Preset { name, k: a.k, code_bits: a.code_bits, seed: a.seed },
                (None, None) => return Err(Error::Usage("cost needs --model or --preset".into())),
            };
            commands::cost(&target, a.out.as_deref())
        }
        Command::Sweep(a) => commands::sweep(
            &a.run.resolve()?,
            &SweepOptions { lambda0: a.lambda0, lambda1: a.lambda1, seeds: a.seeds, baselines: a.baselines },
        ),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
