//! `cfrep`: pipelines for counterfactual representations of embedded text.

mod cmd;
mod config;
mod dataset;
mod error;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use cfrep_core::cfr::{CfrMode, FitMethod};
use cfrep_core::eeec::{Allocation, NameChoice, Version};
use cfrep_core::explicit_cf::ExclusionRule;
use cfrep_core::metrics::Distance;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig, Setting};
use error::{CmdResult, Failure};

#[derive(Parser)]
#[command(
    name = "cfrep",
    version,
    about = "Counterfactual representations: erasure, regression, evaluation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset name used to look up default hyperparameters.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Name of the concept label.
    #[arg(long, global = true)]
    concept: Option<String>,
    #[arg(long, global = true, value_parser = parse_from_str::<CfrMode>)]
    mode: Option<CfrMode>,
    #[arg(long, global = true, value_parser = parse_from_str::<Setting>)]
    setting: Option<Setting>,
}

fn parse_from_str<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset with known counterfactuals.
    GenScm(GenScmArgs),
    /// Fit the concept-erasure projector.
    Erase,
    /// Fit the per-value regression of the concept part.
    FitCfr(FitCfrArgs),
    /// Write counterfactual representations for the dataset's pairs.
    ApplyCfr(ApplyCfrArgs),
    /// Fit a logistic classifier on a label.
    TrainClf(TrainClfArgs),
    /// Compute evaluation metrics.
    Eval(EvalArgs),
    /// Double the training set with opposite-value counterfactuals.
    Augment(AugmentArgs),
    /// Generate the templated emotion corpus.
    GenEeec(GenEeecArgs),
    /// Nearest vocabulary word to a word's counterfactual.
    ExplicitCf(ExplicitCfArgs),
    /// Matching-based approximate counterfactuals.
    BaselineApprox(BaselineApproxArgs),
    /// Convert a GloVe text file to a normalized embedding container.
    ConvertGlove(ConvertGloveArgs),
}

#[derive(Args)]
pub struct GenScmArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1_000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 32)]
    pub p: usize,
    #[arg(long, default_value_t = 2)]
    pub r: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Strength of the concept's effect on the task label.
    #[arg(long, default_value_t = 3.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub label_noise: f64,
    #[arg(long, default_value_t = 10.0)]
    pub perp_condition: f64,
}

#[derive(Args)]
pub struct FitCfrArgs {
    /// Fitted projector; fitted here when absent.
    #[arg(long)]
    pub projector: Option<PathBuf>,
    #[arg(long, value_parser = parse_from_str::<FitMethod>)]
    pub method: Option<FitMethod>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args)]
pub struct ApplyCfrArgs {
    #[arg(long)]
    pub projector: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args)]
pub struct TrainClfArgs {
    /// Label to predict; defaults to the concept.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Embeddings to train on instead of the manifest's (same ids).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Pip,
    Atv,
    Ate,
    AteScore,
    Error,
    Pi,
    TprGap,
    Nested,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Classifier whose behaviour is explained.
    #[arg(long)]
    pub clf: PathBuf,
    /// Counterfactual representations from `apply-cfr`.
    #[arg(long)]
    pub cfr: Option<PathBuf>,
    #[arg(long, default_value = "l2", value_parser = parse_from_str::<Distance>)]
    pub distance: Distance,
    /// Per-class scores for the score-weighted ATE, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scores: Option<Vec<f64>>,
    /// Prefix fractions for the nested analysis, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Task label for the pi and TPR-gap metrics.
    #[arg(long, default_value = "y")]
    pub label: String,
    /// Restrict pi to one concept value (name).
    #[arg(long)]
    pub z_value: Option<String>,
    /// Also report the error of a random explainer.
    #[arg(long)]
    pub random_explainer: bool,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub projector: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Task label copied onto the counterfactual rows.
    #[arg(long, default_value = "y")]
    pub label: String,
}

#[derive(Args)]
pub struct GenEeecArgs {
    #[arg(long, default_value = "balanced", value_parser = parse_from_str::<Version>)]
    pub version: Version,
    #[arg(long, default_value_t = 40_000)]
    pub n: usize,
    #[arg(long, default_value = "exact", value_parser = parse_from_str::<Allocation>)]
    pub allocation: Allocation,
    #[arg(long, default_value = "random", value_parser = parse_from_str::<NameChoice>)]
    pub name_choice: NameChoice,
    /// Template bank replacing the shipped one.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub no_counterfactuals: bool,
}

#[derive(Args)]
pub struct ExplicitCfArgs {
    /// Vocabulary: a GloVe text file or an embedding container.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Concept labels of vocabulary words, to reject same-value queries.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub projector: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Query words, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub words: Vec<String>,
    /// Target concept value (model index).
    #[arg(long)]
    pub target: usize,
    #[arg(long, default_value = "per-candidate", value_parser = parse_from_str::<ExclusionRule>)]
    pub rule: ExclusionRule,
}

#[derive(Args)]
pub struct BaselineApproxArgs {
    /// One classifier per concept, comma separated; the first predicts the
    /// intervened concept.
    #[arg(long, value_delimiter = ',', required = true)]
    pub clf: Vec<PathBuf>,
}

#[derive(Args)]
pub struct ConvertGloveArgs {
    #[arg(long)]
    pub input: PathBuf,
}

fn run(cli: Cli) -> CmdResult<()> {
    let g = cli.global;
    let flags = Overrides {
        config: g.config,
        seed: g.seed,
        manifest: g.manifest,
        out: g.out,
        mode: g.mode,
        setting: g.setting,
        concept: g.concept,
        dataset: g.dataset,
    };
    let cfg = RunConfig::resolve(&flags)?;
    runlog::ensure_dir(&cfg.out)?;
    match cli.command {
        Command::GenScm(a) => cmd::gen_scm(cfg, &a),
        Command::Erase => cmd::erase(cfg),
        Command::FitCfr(a) => cmd::fit_cfr(cfg, &a),
        Command::ApplyCfr(a) => cmd::apply_cfr(cfg, &a),
        Command::TrainClf(a) => cmd::train_clf(cfg, &a),
        Command::Eval(a) => cmd::eval(cfg, &a),
        Command::Augment(a) => cmd::augment(cfg, &a),
        Command::GenEeec(a) => cmd::gen_eeec(cfg, &a),
        Command::ExplicitCf(a) => cmd::explicit_cf(cfg, &a),
        Command::BaselineApprox(a) => cmd::baseline_approx(cfg, &a),
        Command::ConvertGlove(a) => cmd::convert_glove(cfg, &a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { kind, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(kind.exit_code())
        }
    }
}
