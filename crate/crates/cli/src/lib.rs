//! Command implementations behind the `unlearn` binary.
//!
//! Every command reads one TOML configuration, writes its outputs under the
//! output directory and records a manifest from which it can be re-run.

pub mod manifest;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;
use unlearn_core::config::LabConfig;
use unlearn_core::data::dataset::{DATASET_FILE, SPEC_FILE};
use unlearn_core::data::Dataset;
use unlearn_core::eval::{mcq_accuracy, run_sweep, MetricsRecord};
use unlearn_core::methods::{unlearn_run, UnlearnData};
use unlearn_core::nn::{checkpoint, Nonlinearity};
use unlearn_core::theory::{closed_form_checks, model_checks, suite_passes, SuiteEntry};
use unlearn_core::train::train_base;
use unlearn_core::TinyLM;

use manifest::{hash_files, RunManifest};

/// Failure of a command, carrying its exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Validation(_) => 4,
        }
    }
}

impl From<unlearn_core::Error> for CliError {
    fn from(e: unlearn_core::Error) -> Self {
        use unlearn_core::Error as E;
        match e {
            E::Divergence { .. } | E::Numeric(_) => CliError::Divergence(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(format!("csv error: {e}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpora and multiple-choice sets.
    GenData,
    /// Train the base model on the generated data.
    TrainBase,
    /// Unlearn the forget set from the base model.
    Unlearn,
    /// Grade a checkpoint on every configured task.
    Eval,
    /// Run a grid over one unlearning hyperparameter.
    Sweep,
    /// Run the Monte Carlo validator suite.
    VerifyTheory,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainBase => "train-base",
            Command::Unlearn => "unlearn",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::VerifyTheory => "verify-theory",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        [
            Command::GenData,
            Command::TrainBase,
            Command::Unlearn,
            Command::Eval,
            Command::Sweep,
            Command::VerifyTheory,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }
}

#[derive(Debug, Parser)]
#[command(name = "unlearn", version, about = "Unlearning laboratory on a tiny language model")]
pub struct Cli {
    /// TOML configuration; missing keys take the desk defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to every section of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Upper bound on worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Re-run the command and configuration recorded in a manifest.
    #[arg(long, global = true, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Input("--workers must be at least 1".into()));
        }
        // A second build in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let (command, config) = match &cli.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            let command = Command::from_name(&m.command)
                .ok_or_else(|| CliError::Input(format!("manifest names unknown command {:?}", m.command)))?;
            if cli.command.is_some_and(|c| c != command) {
                return Err(CliError::Input(format!("manifest records command {}", m.command)));
            }
            m.config.validate()?;
            (command, m.config.with_seed(cli.seed))
        }
        None => {
            let command = cli
                .command
                .ok_or_else(|| CliError::Input("no command given (see --help)".into()))?;
            let config = match &cli.config {
                Some(p) => LabConfig::load(p)?,
                None => LabConfig::default(),
            };
            (command, config.with_seed(cli.seed))
        }
    };
    std::fs::create_dir_all(&cli.out_dir)?;
    let ctx = Ctx {
        out: cli.out_dir.clone(),
        config,
    };
    let outcome = match command {
        Command::GenData => ctx.gen_data(),
        Command::TrainBase => ctx.train_base(),
        Command::Unlearn => ctx.unlearn(),
        Command::Eval => ctx.eval(),
        Command::Sweep => ctx.sweep(),
        Command::VerifyTheory => ctx.verify_theory(),
    };
    // Validation failures still leave their reports and manifest behind.
    let (inputs, artifacts, failure) = match outcome {
        Ok((i, a)) => (i, a, None),
        Err(Failure::Reported { inputs, artifacts, error }) => (inputs, artifacts, Some(error)),
        Err(Failure::Plain(e)) => return Err(e),
    };
    let manifest = RunManifest {
        command: command.name().to_string(),
        config: ctx.config.clone(),
        seed: ctx.config.seed,
        inputs: hash_files(&ctx.out, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
        artifacts: hash_files(&ctx.out, &artifacts.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    let path = manifest.write(&ctx.out)?;
    println!("manifest: {}", path.display());
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

enum Failure {
    Plain(CliError),
    Reported {
        inputs: Vec<PathBuf>,
        artifacts: Vec<PathBuf>,
        error: CliError,
    },
}

impl<E: Into<CliError>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Plain(e.into())
    }
}

type Outputs = Result<(Vec<PathBuf>, Vec<PathBuf>), Failure>;

struct Ctx {
    out: PathBuf,
    config: LabConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<TinyLM, CliError> {
    if !path.exists() {
        return Err(CliError::Input(format!("checkpoint {} not found", path.display())));
    }
    Ok(checkpoint::load(path)?)
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        LabConfig::resolve(&self.out, p)
    }

    fn data_files(&self) -> Vec<PathBuf> {
        let dir = self.path(&self.config.paths.data_dir);
        vec![dir.join(DATASET_FILE), dir.join(SPEC_FILE)]
    }

    fn load_data(&self) -> Result<Dataset, CliError> {
        let dir = self.path(&self.config.paths.data_dir);
        if !dir.join(DATASET_FILE).exists() {
            return Err(CliError::Input(format!("no dataset in {} (run gen-data first)", dir.display())));
        }
        Ok(Dataset::load(&dir)?)
    }

    fn digest(&self) -> Result<String, CliError> {
        let text = self.config.to_toml_string()?;
        Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
    }

    fn gen_data(&self) -> Outputs {
        let data = Dataset::generate(&self.config.data)?;
        let dir = self.path(&self.config.paths.data_dir);
        std::fs::create_dir_all(&dir)?;
        data.save(&dir)?;
        println!(
            "dataset: {} forget docs, {} retain docs, {} forget MCQs, {} retain MCQs in {}",
            data.forget_docs.len(),
            data.retain_docs.len(),
            data.forget_mcq.len(),
            data.retain_mcq.len(),
            dir.display()
        );
        Ok((vec![], self.data_files()))
    }

    fn train_base(&self) -> Outputs {
        let data = self.load_data()?;
        let (model, history) = train_base(&data, &self.config.train)?;
        let ck = self.path(&self.config.paths.base_checkpoint);
        checkpoint::save(&model, &ck)?;
        let losses = self.out.join("train_loss.csv");
        write_csv(&losses, &history)?;
        if let Some(last) = history.last() {
            println!("trained {} steps, final loss {:.4}", history.len(), last.total);
        }
        Ok((self.data_files(), vec![ck, losses]))
    }

    fn unlearn(&self) -> Outputs {
        let data = self.load_data()?;
        let base_path = self.path(&self.config.paths.base_checkpoint);
        let base = load_checkpoint(&base_path)?;
        let config = self.config.unlearn_config()?;
        let forget = data.forget_samples();
        let retain = data.retain_samples();
        let ud = UnlearnData {
            forget: &forget,
            retain: &retain,
            idk: &data.idk,
        };
        let outcome = unlearn_run(&base, ud, &config)?;
        let ck = self.path(&self.config.paths.unlearned_checkpoint);
        checkpoint::save(&outcome.model, &ck)?;
        let losses = self.out.join("unlearn_loss.csv");
        write_csv(&losses, &outcome.history)?;
        println!("{} unlearned for {} steps", config.method, config.steps);
        let mut inputs = self.data_files();
        inputs.push(base_path);
        Ok((inputs, vec![ck, losses]))
    }

    fn eval(&self) -> Outputs {
        let data = self.load_data()?;
        let ck = self.path(&self.config.paths.eval_checkpoint);
        let model = load_checkpoint(&ck)?;
        let digest = self.digest()?;
        let seed = self.config.unlearn_config()?.seed;
        let records: Vec<MetricsRecord> = self
            .config
            .eval
            .tasks
            .iter()
            .map(|t| {
                Ok(mcq_accuracy(&model, &data.vocab, t.items(&data), self.config.eval.normalize, t.name())?
                    .with_run(digest.clone(), seed))
            })
            .collect::<Result<_, CliError>>()?;
        for r in &records {
            println!("{:<20} accuracy {:.4} ({}/{})", r.task, r.accuracy, r.correct, r.n_items);
        }
        let out = self.out.join("metrics.json");
        write_json(&out, &records)?;
        let mut inputs = self.data_files();
        inputs.push(ck);
        Ok((inputs, vec![out]))
    }

    fn sweep(&self) -> Outputs {
        let data = Arc::new(self.load_data()?);
        let base_path = self.path(&self.config.paths.base_checkpoint);
        let base = Arc::new(load_checkpoint(&base_path)?);
        let spec = self.config.sweep_spec()?;
        let table = self.path(&self.config.paths.sweep_table);
        let provider = move |_seed: u64| Ok((data.clone(), base.clone()));
        let rows = run_sweep(&spec, &provider, Some(&table))?;
        println!("{} new rows in {}", rows.len(), table.display());
        let mut inputs = self.data_files();
        inputs.push(base_path);
        Ok((inputs, vec![table]))
    }

    fn verify_theory(&self) -> Outputs {
        let dir = self.path(&self.config.paths.theory_dir);
        std::fs::create_dir_all(&dir)?;
        let base_path = self.path(&self.config.paths.base_checkpoint);
        let mut inputs = Vec::new();
        let (data, model) = if base_path.exists() && self.data_files()[0].exists() {
            inputs = self.data_files();
            inputs.push(base_path.clone());
            (self.load_data()?, checkpoint::load(&base_path)?)
        } else {
            let t = &self.config.train;
            let data = Dataset::generate(&self.config.data)?;
            let model = TinyLM::init(data.vocab.size, t.width, t.num_layers, Nonlinearity::Tanh, t.embed_scale, t.seed)?;
            (data, model)
        };
        let mut entries: Vec<SuiteEntry> = closed_form_checks(&self.config.theory)?;
        entries.extend(model_checks(&self.config.theory, &model, &data)?);
        let mut artifacts = Vec::new();
        for e in &entries {
            let path = dir.join(format!("{}.json", e.report.name));
            write_json(&path, e)?;
            artifacts.push(path);
            println!(
                "{:<4} {:<40} {} {:.5} (tol {:.5}){}",
                if e.report.pass { "ok" } else { "FAIL" },
                e.report.name,
                e.report.error.metric,
                e.report.error.value,
                e.report.tol,
                if e.asserted { "" } else { " [reported only]" }
            );
        }
        if suite_passes(&entries) {
            Ok((inputs, artifacts))
        } else {
            let failed: Vec<&str> = entries
                .iter()
                .filter(|e| e.asserted && !e.report.pass)
                .map(|e| e.report.name.as_str())
                .collect();
            Err(Failure::Reported {
                inputs,
                artifacts,
                error: CliError::Validation(format!("{} validator(s) failed: {}", failed.len(), failed.join(", "))),
            })
        }
    }
}
