use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctcaps::metrics::DEFAULT_CUTOFFS;
use ctcaps::model::{Stage, TrainConfig, SUPPORTED_INPUT_SIZES};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "ctcaps", version, about = "Capsule-network COVID classifier for chest CT volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort (volumes + cohort.txt).
    Synth(SynthArgs),
    /// Train the slice network, the patient head, or both (--full).
    Train(TrainArgs),
    /// Write one pooled 32×16 feature map per patient.
    Extract(ExtractArgs),
    /// Classify one volume directory.
    Classify(ClassifyArgs),
    /// Score the test partition and write report.csv, auc.txt and roc.csv.
    Evaluate(EvaluateArgs),
    /// Write Grad-CAM heat maps for every slice of one volume.
    Gradcam(GradcamArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub covid: usize,
    #[arg(long = "non-covid", default_value_t = 20)]
    pub non_covid: usize,
    #[arg(long, default_value_t = 10)]
    pub slices: usize,
    #[arg(long = "input-size", default_value_t = 64)]
    pub input_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Slice,
    Patient,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Cohort directory (slice stage) or feature directory (patient stage).
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory; stages write its `slice/` and `patient/` bundles.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, required_unless_present = "full")]
    pub stage: Option<StageArg>,
    /// Slice stage, feature extraction, then patient stage.
    #[arg(long, conflicts_with = "stage")]
    pub full: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Slice network input size; defaults to the cohort's slice size.
    #[arg(long = "input-size")]
    pub input_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// A single volume directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub cutoff: f32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the split whose test partition is scored.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CUTOFFS.to_vec())]
    pub cutoffs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Covid,
    NonCovid,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TargetArg::Covid)]
    pub target: TargetArg,
}

/// Problems with flags, caught before any work starts.
pub fn config_error(msg: impl Into<String>) -> crate::commands::CliError {
    crate::commands::CliError::Config(msg.into())
}

pub fn check_input_size(size: usize) -> Result<(), crate::commands::CliError> {
    if SUPPORTED_INPUT_SIZES.contains(&size) {
        Ok(())
    } else {
        Err(config_error(format!("--input-size {size} is not one of {SUPPORTED_INPUT_SIZES:?}")))
    }
}

impl TrainArgs {
    /// Stage defaults overridden by any flags given.
    pub fn stage_config(&self, stage: Stage) -> Result<TrainConfig, crate::commands::CliError> {
        let mut cfg = match stage {
            Stage::Slice => TrainConfig::slice_stage(),
            Stage::Patient => TrainConfig::patient_stage(),
        };
        cfg.seed = self.seed;
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = self.lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(config_error(format!("--lr must be positive, got {lr}")));
            }
            cfg.lr = lr;
        }
        if let Some(b) = self.batch {
            if b == 0 {
                return Err(config_error("--batch must be at least 1"));
            }
            cfg.batch_size = b;
        }
        if let Some(s) = self.input_size {
            check_input_size(s)?;
        }
        Ok(cfg)
    }
}

/// `key=value` record of a resolved configuration.
#[derive(Default)]
pub struct RunRecord(String);

impl RunRecord {
    pub fn new(command: &str) -> Self {
        let mut r = RunRecord::default();
        r.set("command", command);
        r.set("version", env!("CARGO_PKG_VERSION"));
        r
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        writeln!(self.0, "{key}={value}").unwrap();
        self
    }

    pub fn train(&mut self, cfg: &TrainConfig) -> &mut Self {
        let p = cfg.stage.name();
        self.set(&format!("{p}.epochs"), cfg.epochs)
            .set(&format!("{p}.lr"), cfg.lr)
            .set(&format!("{p}.batch"), cfg.batch_size)
            .set(&format!("{p}.seed"), cfg.seed)
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}
