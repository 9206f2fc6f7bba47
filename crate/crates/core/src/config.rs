//! The TOML configuration shared by every command.
//!
//! A file only needs the keys it changes: it is merged over the desk defaults
//! before typed parsing, so unknown keys are still rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CorpusSpec;
use crate::error::{input, Error, Result};
use crate::eval::sweep::{SweepSpec, SweptParam, Task};
use crate::methods::{Method, UnlearnConfig};
use crate::profile::{desk_corpus, desk_train};
use crate::theory::TheoryConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnSection {
    /// `"desk"` or `"paper-defaults"`.
    pub profile: String,
    pub method: Method,
    /// Fields of the resolved run configuration replaced after the profile.
    #[serde(default)]
    pub overrides: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Score options by mean rather than summed token log-probability.
    pub normalize: bool,
    pub tasks: Vec<Task>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub param: SweptParam,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<Task>,
}

/// File locations, relative to the output directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub base_checkpoint: PathBuf,
    pub unlearned_checkpoint: PathBuf,
    /// Checkpoint graded by `eval`.
    pub eval_checkpoint: PathBuf,
    pub sweep_table: PathBuf,
    pub theory_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    /// When set, replaces the seed of every section.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub data: CorpusSpec,
    pub train: TrainConfig,
    pub unlearn: UnlearnSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub theory: TheoryConfig,
    pub paths: PathsSection,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data: desk_corpus(0),
            train: desk_train(0),
            unlearn: UnlearnSection {
                profile: "desk".into(),
                method: Method::Rmu,
                overrides: toml::Table::new(),
            },
            eval: EvalSection {
                normalize: true,
                tasks: Task::ALL.to_vec(),
            },
            sweep: SweepSection {
                param: SweptParam::C,
                grid: vec![2.0, 4.0, 8.0, 16.0, 32.0],
                seeds: (0..5).collect(),
                tasks: Task::ALL.to_vec(),
            },
            theory: TheoryConfig::default(),
            paths: PathsSection {
                data_dir: "data".into(),
                base_checkpoint: "base.ck".into(),
                unlearned_checkpoint: "unlearned.ck".into(),
                eval_checkpoint: "unlearned.ck".into(),
                sweep_table: "sweep.csv".into(),
                theory_dir: "theory".into(),
            },
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "overrides" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl LabConfig {
    /// Parses TOML text merged over the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))?;
        let mut table = toml::Table::try_from(LabConfig::default()).map_err(|e| Error::Format(e.to_string()))?;
        merge(&mut table, over);
        let config: LabConfig = table.try_into().map_err(|e| Error::Input(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Sets the global seed and propagates it to every section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train.seed = s;
            self.theory.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.theory.validate()?;
        self.unlearn_config()?.validate(self.train.num_layers)?;
        self.sweep_spec()?.validate()?;
        if self.eval.tasks.is_empty() {
            return input("eval.tasks is empty");
        }
        Ok(())
    }

    /// The run configuration after applying the profile, the overrides and the
    /// global seed.
    pub fn unlearn_config(&self) -> Result<UnlearnConfig> {
        let mut resolved = UnlearnConfig::profile(&self.unlearn.profile, self.unlearn.method)?;
        if let Some(s) = self.seed {
            resolved.seed = s;
        }
        if self.unlearn.overrides.is_empty() {
            return Ok(resolved);
        }
        let mut table = toml::Table::try_from(&resolved).map_err(|e| Error::Format(e.to_string()))?;
        for (k, v) in &self.unlearn.overrides {
            table.insert(k.clone(), v.clone());
        }
        table
            .try_into()
            .map_err(|e| Error::Input(format!("config: unlearn.overrides: {e}")))
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        Ok(SweepSpec {
            param: self.sweep.param,
            grid: self.sweep.grid.clone(),
            base: self.unlearn_config()?,
            seeds: self.sweep.seeds.clone(),
            tasks: self.sweep.tasks.clone(),
            normalize: self.eval.normalize,
        })
    }

    /// `p` resolved against `out_dir`.
    pub fn resolve(out_dir: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out_dir.join(p)
        }
    }
}
