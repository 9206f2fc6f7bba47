//! Grid sweeps over one unlearning hyperparameter with resumable CSV output.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{mcq_accuracy, recovery_rate, reduction_rate};
use crate::data::{Dataset, McqItem};
use crate::error::{input, Error, Result};
use crate::methods::{unlearn_run, UnlearnConfig, UnlearnData};
use crate::nn::TinyLM;

/// Hyperparameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweptParam {
    /// RMU and RSV target magnitude `c`.
    C,
    /// Adaptive RMU scaling factor.
    BetaRm,
    /// RNA noise variance; every positive value enables RNA.
    Nu,
    UnlearnLayer,
}

impl SweptParam {
    pub fn name(self) -> &'static str {
        match self {
            SweptParam::C => "c",
            SweptParam::BetaRm => "beta_rm",
            SweptParam::Nu => "nu",
            SweptParam::UnlearnLayer => "unlearn_layer",
        }
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &UnlearnConfig, value: f64) -> Result<UnlearnConfig> {
        let mut c = base.clone();
        match self {
            SweptParam::C => c.coefficient = value,
            SweptParam::BetaRm => c.scaling_factor = value,
            SweptParam::Nu => {
                c.noise_scale = value;
                c.rna_enabled = value > 0.0;
            }
            SweptParam::UnlearnLayer => {
                if value < 1.0 || value.fract() != 0.0 {
                    return input(format!("unlearn_layer must be a positive integer, got {value}"));
                }
                c.unlearn_layer = value as usize;
            }
        }
        Ok(c)
    }
}

impl std::str::FromStr for SweptParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweptParam::C, SweptParam::BetaRm, SweptParam::Nu, SweptParam::UnlearnLayer]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown swept parameter {s:?}")))
    }
}

/// Evaluation task of a sweep row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Forget,
    Retain,
    PerturbedRetain,
    RetainNearForget,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Forget, Task::Retain, Task::PerturbedRetain, Task::RetainNearForget];

    pub fn name(self) -> &'static str {
        match self {
            Task::Forget => "forget",
            Task::Retain => "retain",
            Task::PerturbedRetain => "perturbed_retain",
            Task::RetainNearForget => "retain_near_forget",
        }
    }

    pub fn items(self, data: &Dataset) -> &[McqItem] {
        match self {
            Task::Forget => &data.forget_mcq,
            Task::Retain => &data.retain_mcq,
            Task::PerturbedRetain => &data.perturbed_retain_mcq,
            Task::RetainNearForget => &data.near_forget_mcq,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown task {s:?}")))
    }
}

/// Accuracy of `model` on each task.
pub fn evaluate_tasks(model: &TinyLM, data: &Dataset, tasks: &[Task], normalize: bool) -> Result<BTreeMap<Task, f64>> {
    tasks
        .iter()
        .map(|&t| Ok((t, mcq_accuracy(model, &data.vocab, t.items(data), normalize, t.name())?.accuracy)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweptParam,
    pub grid: Vec<f64>,
    pub base: UnlearnConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "all_tasks")]
    pub tasks: Vec<Task>,
    /// Length-normalized option scoring.
    #[serde(default = "length_normalized")]
    pub normalize: bool,
}

fn length_normalized() -> bool {
    true
}

fn all_tasks() -> Vec<Task> {
    Task::ALL.to_vec()
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return input("sweep grid is empty");
        }
        if self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return input("sweep grid must be strictly increasing");
        }
        if self.seeds.is_empty() || self.tasks.is_empty() {
            return input("sweep needs at least one seed and one task");
        }
        for &v in &self.grid {
            self.param.apply(&self.base, v)?;
        }
        Ok(())
    }

    /// Configuration of one grid point and seed.
    pub fn point(&self, value: f64, seed: u64) -> Result<UnlearnConfig> {
        let mut c = self.param.apply(&self.base, value)?;
        c.seed = seed;
        Ok(c)
    }
}

/// Short hex digest identifying a run configuration.
pub fn config_digest(config: &UnlearnConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

/// One CSV row. Optional fields are written blank when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub method: String,
    pub swept_param: String,
    pub value: f64,
    pub seed: u64,
    pub task: String,
    pub accuracy: Option<f64>,
    pub n_items: usize,
    pub reduction_rate: Option<f64>,
    pub recovery_rate: Option<f64>,
}

/// Task name written on the single row of a diverged run.
pub const FAILED_TASK: &str = "failed";

/// Base model and data used for one sweep seed.
pub type BaseProvider<'a> = dyn Fn(u64) -> Result<(Arc<Dataset>, Arc<TinyLM>)> + Sync + 'a;

fn run_point(spec: &SweepSpec, value: f64, seed: u64, provider: &BaseProvider<'_>) -> Result<Vec<SweepRow>> {
    let config = spec.point(value, seed)?;
    let run_id = config_digest(&config);
    let (data, base) = provider(seed)?;
    let forget = data.forget_samples();
    let retain = data.retain_samples();
    let ud = UnlearnData {
        forget: &forget,
        retain: &retain,
        idk: &data.idk,
    };
    let row = |task: &str, accuracy: Option<f64>, n_items, reduction, recovery| SweepRow {
        run_id: run_id.clone(),
        method: config.method.name().to_string(),
        swept_param: spec.param.name().to_string(),
        value,
        seed,
        task: task.to_string(),
        accuracy,
        n_items,
        reduction_rate: reduction,
        recovery_rate: recovery,
    };
    let model = match unlearn_run(&base, ud, &config) {
        Ok(out) => out.model,
        Err(Error::Divergence { .. }) => return Ok(vec![row(FAILED_TASK, None, 0, None, None)]),
        Err(e) => return Err(e),
    };
    let acc = evaluate_tasks(&model, &data, &spec.tasks, spec.normalize)?;
    let base_acc = evaluate_tasks(&base, &data, &spec.tasks, spec.normalize)?;
    // RNA recovery is measured against the same run without noise.
    let plain_acc = if config.rna_active() {
        let mut plain = config.clone();
        plain.rna_enabled = false;
        match unlearn_run(&base, ud, &plain) {
            Ok(out) => Some(evaluate_tasks(&out.model, &data, &spec.tasks, spec.normalize)?),
            Err(Error::Divergence { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(spec
        .tasks
        .iter()
        .map(|t| {
            let a = acc[t];
            let recovery = plain_acc.as_ref().and_then(|p| recovery_rate(a, p[t], base_acc[t]));
            row(t.name(), Some(a), t.items(&data).len(), reduction_rate(base_acc[t], a), recovery)
        })
        .collect())
}

/// Reads the rows of an existing sweep table.
pub fn read_table(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Runs every grid point and seed, appending rows to `table` in grid-then-seed
/// order. Runs whose `run_id` already appears in `table` are skipped. Returns
/// the rows produced by this call.
pub fn run_sweep(spec: &SweepSpec, provider: &BaseProvider<'_>, table: Option<&Path>) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let done: HashSet<String> = match table {
        Some(p) if p.exists() => read_table(p)?.into_iter().map(|r| r.run_id).collect(),
        _ => HashSet::new(),
    };
    let mut points = Vec::new();
    for &v in &spec.grid {
        for &s in &spec.seeds {
            if !done.contains(&config_digest(&spec.point(v, s)?)) {
                points.push((v, s));
            }
        }
    }
    let writer = match table {
        Some(p) => {
            let fresh = !p.exists() || std::fs::metadata(p)?.len() == 0;
            let file = OpenOptions::new().create(true).append(true).open(p)?;
            Some(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
        }
        None => None,
    };
    // Completed runs are flushed strictly in point order.
    struct Flush {
        next: usize,
        pending: BTreeMap<usize, Vec<SweepRow>>,
        writer: Option<csv::Writer<std::fs::File>>,
        all: Vec<SweepRow>,
    }
    let state = Mutex::new(Flush {
        next: 0,
        pending: BTreeMap::new(),
        writer,
        all: Vec::new(),
    });
    points
        .par_iter()
        .enumerate()
        .try_for_each(|(i, &(v, s))| -> Result<()> {
            let rows = run_point(spec, v, s, provider)?;
            let mut st = state.lock().expect("flush lock");
            st.pending.insert(i, rows);
            loop {
                let next = st.next;
                let Some(rows) = st.pending.remove(&next) else { break };
                if let Some(w) = st.writer.as_mut() {
                    for r in &rows {
                        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
                    }
                    w.flush()?;
                }
                st.all.extend(rows);
                st.next += 1;
            }
            Ok(())
        })?;
    Ok(state.into_inner().expect("flush lock").all)
}

/// Mean accuracy of `task` per grid value over seeds, skipping failed runs.
pub fn mean_by_value(rows: &[SweepRow], task: Task) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.task == task.name()) {
        if let Some(a) = r.accuracy {
            let e = acc.entry(r.value.to_bits()).or_insert((r.value, 0.0, 0));
            e.1 += a;
            e.2 += 1;
        }
    }
    let mut out: Vec<(f64, f64)> = acc.into_values().map(|(v, s, n)| (v, s / n as f64)).collect();
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

/// Saturation of a metric over an increasing grid: the maximum is interior, or
/// the last two points differ by less than `band`.
pub fn saturates(curve: &[(f64, f64)], band: f64) -> bool {
    if curve.len() < 2 {
        return false;
    }
    let best = (0..curve.len()).fold(0, |b, i| if curve[i].1 > curve[b].1 { i } else { b });
    let n = curve.len();
    (best > 0 && best < n - 1) || (curve[n - 1].1 - curve[n - 2].1).abs() < band
}
