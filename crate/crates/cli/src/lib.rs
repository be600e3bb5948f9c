//! Command-line front end: data generation, preprocessing, cross-validated
//! training, ensemble inference, evaluation and reporting.

pub mod commands;
pub mod manifest;
pub mod report;
pub mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "planet", version, about = "Placental MRI segmentation with a U-Net + SegNeXt-S TTA ensemble")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand that reads settings.
#[derive(Clone, Debug, Default, Args)]
pub struct SettingsArgs {
    /// Flat `key = value` settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable. Takes precedence over `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with a manifest.
    Datagen(DatagenArgs),
    /// Standardize a dataset onto 256×256 canvases and record the patient split.
    Preprocess(PreprocessArgs),
    /// Cross-validate one architecture on the training patients.
    Train(TrainArgs),
    /// Run the ensemble on a dataset and write masks and probability maps.
    Infer(InferArgs),
    /// Compare the ensemble with U-Net TTA on the held-out patients.
    Evaluate(EvaluateArgs),
    /// Rebuild the summary and figures from a metrics table.
    Report(ReportArgs),
}

#[derive(Clone, Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub patients: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub settings: SettingsArgs,
}

#[derive(Clone, Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[command(flatten)]
    pub settings: SettingsArgs,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// `unet` or `segnext_s`.
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
    /// Run directory name; defaults to `run-<unix secs>-<arch>`.
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub settings: SettingsArgs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    #[default]
    All,
    Test,
}

#[derive(Clone, Debug, Args)]
pub struct InferArgs {
    /// U-Net training run directory.
    #[arg(long)]
    pub unet: PathBuf,
    /// SegNeXt-S training run directory.
    #[arg(long)]
    pub segnext: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    pub subset: Subset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_variants: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub settings: SettingsArgs,
}

#[derive(Clone, Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub unet: PathBuf,
    #[arg(long)]
    pub segnext: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_variants: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub settings: SettingsArgs,
}

#[derive(Clone, Debug, Args)]
pub struct ReportArgs {
    /// `metrics.csv` written by `evaluate`.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one parsed invocation and returns its output directory.
pub fn run(cli: &Cli) -> anyhow::Result<PathBuf> {
    match &cli.command {
        Command::Datagen(a) => commands::cmd_datagen(a),
        Command::Preprocess(a) => commands::cmd_preprocess(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Infer(a) => commands::cmd_infer(a),
        Command::Evaluate(a) => commands::cmd_evaluate(a),
        Command::Report(a) => commands::cmd_report(a),
    }
}

/// Parses `args` (program name first), runs the command and maps the result
/// to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(out) => {
            println!("{}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
