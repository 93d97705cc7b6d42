//! `psnet` command-line interface: train, eval, gradcheck and ablate.

pub mod checkpoint;
pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::checks::{run_scope, CheckResult, Scope};
use crate::data::{
    cluster_centroid_report, evaluate_classification, evaluate_verification, hardness_from_scores, load_idx,
    make_synthetic, map_chunks, parse_pairs, DataError, LabeledData, SyntheticParams,
};
use crate::models::{build_model, ModelError, PsnetModel};
use crate::psn::PsnMode;
use crate::tensor::{Tensor, TensorError};
use crate::training::{train, EpochMetrics, TrainError};
use checkpoint::CheckpointError;
use config::{ConfigError, DataSource, RunConfig};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,alpha,beta,gamma";
pub const ABLATION_HEADER: &str = "mode,train_acc,eval_acc,alpha,beta,gamma";

/// Failure classes with stable process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::GradCheck(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn is_numerical(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) if is_numerical(&t) => CliError::Numerical(t.to_string()),
            ModelError::Tensor(t @ TensorError::ZeroNorm { .. }) => CliError::Numerical(t.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::NanGradient { .. } => CliError::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::EmptyDataset => CliError::Data(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "psnet", version, about = "Train and evaluate PSN models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.csv and final.ckpt to output.dir.
    Train { config: PathBuf },
    /// Evaluate a checkpoint by pair verification or classification.
    Eval(EvalArgs),
    /// Run gradient-check suites against finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        /// Negate every analytic gradient so that every check must fail.
        #[arg(long)]
        negative_control: bool,
    },
    /// Train one model per PSN mode from a shared seed; writes ablation.csv.
    Ablate {
        config: PathBuf,
        /// `all` or a comma-separated list of mode names.
        #[arg(long, default_value = "all")]
        modes: String,
    },
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("task").required(true).args(["pairs", "classify"])))]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    /// Pairs file: `index_a index_b {0|1}` per line, indices into the eval set.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Report argmax classification accuracy.
    #[arg(long)]
    pub classify: bool,
    /// Also write the easy/hard centroid report CSV to this path.
    #[arg(long)]
    pub cluster: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Psn,
    Losses,
    Model,
    All,
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psnet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config } => cmd_train(&config),
        Command::Eval(args) => cmd_eval(&args),
        Command::Gradcheck {
            scope,
            negative_control,
        } => cmd_gradcheck(scope, negative_control),
        Command::Ablate { config, modes } => cmd_ablate(&config, &modes),
    }
}

/// Training and evaluation sets plus ground-truth hardness when known.
pub struct LoadedData {
    pub train: LabeledData<f64>,
    pub eval: LabeledData<f64>,
    pub eval_hard: Option<Vec<bool>>,
}

fn with_classes(mut d: crate::data::Dataset, k: usize) -> Result<LabeledData<f64>, CliError> {
    d.num_classes = k;
    Ok(d.to_labeled()?)
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    match &cfg.data {
        DataSource::Idx {
            train_images,
            train_labels,
            test,
            num_classes,
        } => {
            let train = with_classes(load_idx(train_images, train_labels)?, *num_classes)?;
            let eval = match test {
                Some((i, l)) => with_classes(load_idx(i, l)?, *num_classes)?,
                None => train.clone(),
            };
            if train.sample_shape() != eval.sample_shape() {
                return Err(CliError::Data(format!(
                    "train images {:?} and test images {:?} differ in shape",
                    train.sample_shape(),
                    eval.sample_shape()
                )));
            }
            Ok(LoadedData {
                train,
                eval,
                eval_hard: None,
            })
        }
        DataSource::Synthetic(s) => {
            let p = SyntheticParams {
                num_classes: s.classes,
                per_class: s.per_class,
                hard_fraction: s.hard_fraction,
                dim: s.dim,
                separation: s.separation,
                hard_offset: s.hard_offset,
                seed: s.seed,
            };
            let train = make_synthetic::<f64>(&p).map_err(|e| CliError::Config(e.to_string()))?;
            let test = make_synthetic::<f64>(&SyntheticParams { seed: s.test_seed, ..p })
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(LoadedData {
                train: train.data,
                eval: test.data,
                eval_hard: Some(test.hard),
            })
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc,
            opt(r.alpha),
            opt(r.beta),
            opt(r.gamma)
        );
    }
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// Trains `cfg` on `data.train`, writing `metrics.csv` and `final.ckpt` into `dir`.
fn train_into(
    cfg: &RunConfig,
    data: &LoadedData,
    dir: &Path,
) -> Result<(PsnetModel<f64>, Vec<EpochMetrics>), CliError> {
    let mcfg = cfg.model_config(data.train.sample_shape());
    let mut model = build_model::<f64>(&mcfg, cfg.train.seed)?;
    let history = train(&mut model, &data.train, &cfg.train)?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&history).as_bytes())?;
    write_file(&dir.join("final.ckpt"), &checkpoint::encode(&model.state()))?;
    Ok((model, history))
}

pub fn cmd_train(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let data = load_data(&cfg)?;
    let (_, history) = train_into(&cfg, &data, &cfg.output_dir)?;
    let last = history.last().expect("at least one epoch");
    println!("train_accuracy={:.6}", last.train_acc);
    println!("output_dir={}", cfg.output_dir.display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let state = checkpoint::load(&args.checkpoint)?;
    let data = load_data(&cfg)?;
    let mut model = build_model::<f64>(&cfg.model_config(data.eval.sample_shape()), cfg.train.seed)?;
    model
        .load_state(&state)
        .map_err(|e| CliError::Config(format!("checkpoint does not match config: {e}")))?;
    if let Some(path) = &args.pairs {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let pairs =
            parse_pairs(&text, data.eval.len()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let acc = evaluate_verification(&model, &data.eval, &pairs, cfg.eval_folds, cfg.eval_embedding)?;
        println!("verification_accuracy={acc:.6}");
    } else {
        let acc = evaluate_classification(&model, &data.eval)?;
        println!("classification_accuracy={acc:.6}");
    }
    if let Some(path) = &args.cluster {
        let psn = model
            .psn_params()
            .ok_or_else(|| CliError::Config("cluster report needs psn.mode other than disabled".into()))?;
        let (feats, d) = map_chunks(&data.eval, |b| Ok(model.forward_features(b)?))?;
        let feats = Tensor::from_vec(&[data.eval.len(), d], feats).map_err(|e| CliError::Data(e.to_string()))?;
        let (hard, tau) = match &data.eval_hard {
            Some(h) => (h.clone(), None),
            None => (
                hardness_from_scores(&model, &data.eval, cfg.hard_threshold)?,
                Some(cfg.hard_threshold),
            ),
        };
        let mut report = cluster_centroid_report(&feats, &psn, &hard, data.eval.labels())?;
        report.tau = tau;
        write_file(path, report.to_csv().as_bytes())?;
        println!("cluster_ratio={:.6}", report.mean_ratio);
    }
    Ok(())
}

pub fn cmd_gradcheck(scope: ScopeArg, negative_control: bool) -> Result<(), CliError> {
    let scopes: &[Scope] = match scope {
        ScopeArg::Psn => &[Scope::Psn],
        ScopeArg::Losses => &[Scope::Losses],
        ScopeArg::Model => &[Scope::Model],
        ScopeArg::All => &[Scope::Psn, Scope::Losses, Scope::Model],
    };
    let mut failed: Vec<CheckResult> = Vec::new();
    for &s in scopes {
        let results = run_scope(s, negative_control).map_err(|e| CliError::GradCheck(e.to_string()))?;
        for r in results {
            println!("{r}");
            if !r.passed() {
                failed.push(r);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|r| r.name.as_str()).collect();
        Err(CliError::GradCheck(names.join(", ")))
    }
}

pub fn parse_modes(list: &str) -> Result<Vec<PsnMode>, CliError> {
    if list.trim() == "all" {
        return Ok(PsnMode::ALL.to_vec());
    }
    list.split(',')
        .map(|m| {
            m.trim()
                .parse()
                .map_err(|e: crate::psn::PsnError| CliError::Config(e.to_string()))
        })
        .collect()
}

pub fn cmd_ablate(config: &Path, modes: &str) -> Result<(), CliError> {
    let base = RunConfig::load(config)?;
    let modes = parse_modes(modes)?;
    let data = load_data(&base)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut first_err: Option<CliError> = None;
    for mode in modes {
        let cfg = RunConfig {
            psn_mode: mode,
            ..base.clone()
        };
        let row = train_into(&cfg, &data, &base.output_dir.join(mode.as_str())).and_then(|(model, history)| {
            let eval = evaluate_classification(&model, &data.eval)?;
            Ok((history.last().cloned().expect("at least one epoch"), eval))
        });
        match row {
            Ok((last, eval)) => {
                let line = format!(
                    "{mode},{},{eval},{},{},{}",
                    last.train_acc,
                    opt(last.alpha),
                    opt(last.beta),
                    opt(last.gamma)
                );
                println!("{line}");
                csv.push_str(&line);
                csv.push('\n');
            }
            Err(e) => {
                eprintln!("psnet: mode {mode}: {e}");
                let _ = writeln!(csv, "{mode},,,,,");
                first_err.get_or_insert(e);
            }
        }
    }
    write_file(&base.output_dir.join("ablation.csv"), csv.as_bytes())?;
    first_err.map_or(Ok(()), Err)
}
