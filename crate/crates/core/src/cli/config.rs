//! Experiment configuration files.
//!
//! A config is a JSON document with `schema_version` 1. Relative paths are
//! resolved against the directory containing the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticDictionarySpec;
use crate::downstream::{AblationSource, AttributionRule, CorpusSpec, LogisticConfig};
use crate::ensemble::EnsembleKind;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_TAU;
use crate::sae::{Activation, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub sae: SaeSection,
    #[serde(default)]
    pub ensemble: Option<EnsembleSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub downstream: DownstreamSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    Manifest {
        train: PathBuf,
        #[serde(default)]
        eval: Option<PathBuf>,
    },
    Synthetic {
        spec: SyntheticDictionarySpec,
        n_train: usize,
        n_eval: usize,
        #[serde(default = "default_shard")]
        samples_per_shard: usize,
    },
}

fn default_shard() -> usize {
    65_536
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSection {
    pub activation: Activation,
    pub dict_size: usize,
    /// `seed` inside is replaced by the global seed.
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub kind: EnsembleKind,
    #[serde(rename = "J")]
    pub j: usize,
    /// Defaults to `seed + j` for `j` in `0..J`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
}

fn default_taus() -> Vec<f64> {
    vec![0.3, 0.5, DEFAULT_TAU, 0.9]
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { taus: default_taus() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// A `*.corpus.json` sidecar written by [`crate::downstream::LabeledSequenceSet::save`].
    Path {
        sidecar: PathBuf,
    },
    Synthetic {
        spec: CorpusSpec,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamSection {
    #[serde(default)]
    pub concept: Option<ConceptSection>,
    #[serde(default)]
    pub scr: Option<ScrSection>,
    #[serde(default)]
    pub logistic: LogisticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSection {
    pub corpus: CorpusSource,
    pub labels: Vec<String>,
    #[serde(rename = "L_values", default = "default_concept_l")]
    pub l_values: Vec<usize>,
    /// Also evaluate each label with permuted labels.
    #[serde(default)]
    pub shuffled_control: bool,
}

fn default_concept_l() -> Vec<usize> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScrSection {
    pub biased: CorpusSource,
    pub balanced: CorpusSource,
    #[serde(default = "default_task")]
    pub task_label: String,
    #[serde(default = "default_spurious")]
    pub spurious_label: String,
    #[serde(rename = "L_values", default = "default_scr_l")]
    pub l_values: Vec<usize>,
    #[serde(default)]
    pub rule: AttributionRule,
    #[serde(default)]
    pub source: AblationSource,
}

fn default_task() -> String {
    "task".into()
}

fn default_spurious() -> String {
    "spurious".into()
}

fn default_scr_l() -> Vec<usize> {
    vec![5, 10, 20]
}

/// A parsed config with its hash and base directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Lowercase hex SHA-256 of the config file bytes.
    pub hash: String,
    pub base_dir: PathBuf,
}

pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl LoadedConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig =
            serde_json::from_slice(&bytes).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { config, hash: config_hash(&bytes), base_dir };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks every section before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                c.schema_version
            )));
        }
        match &c.dataset {
            DatasetSection::Manifest { train, eval } => {
                for p in std::iter::once(train).chain(eval) {
                    self.require_exists(p)?;
                }
            }
            DatasetSection::Synthetic { spec, n_train, n_eval, samples_per_shard } => {
                spec.validate()?;
                if *n_train == 0 || *n_eval == 0 {
                    return Err(Error::invalid("n_train and n_eval must be positive"));
                }
                if *samples_per_shard == 0 {
                    return Err(Error::invalid("samples_per_shard must be positive"));
                }
            }
        }
        if c.sae.dict_size == 0 {
            return Err(Error::invalid("dict_size must be positive"));
        }
        if let Activation::Topk { k } = c.sae.activation {
            if k == 0 || k > c.sae.dict_size {
                return Err(Error::invalid(format!("topk k must be in 1..={}", c.sae.dict_size)));
            }
        }
        c.sae.train.validate()?;
        if let Some(e) = &c.ensemble {
            if e.j == 0 {
                return Err(Error::invalid("ensemble J must be positive"));
            }
            if let Some(s) = &e.seeds {
                if s.len() != e.j {
                    return Err(Error::invalid(format!("ensemble lists {} seeds for J = {}", s.len(), e.j)));
                }
            }
            let seeds = self.ensemble_seeds()?;
            let mut sorted = seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != seeds.len() {
                return Err(Error::invalid("ensemble seeds must be distinct"));
            }
        }
        if c.eval.taus.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::invalid("taus must lie in (0, 1]"));
        }
        if let Some(cs) = &c.downstream.concept {
            self.validate_corpus(&cs.corpus)?;
            if cs.labels.is_empty() {
                return Err(Error::invalid("concept section lists no labels"));
            }
            if cs.l_values.contains(&0) {
                return Err(Error::invalid("concept L values must be positive"));
            }
        }
        if let Some(s) = &c.downstream.scr {
            self.validate_corpus(&s.biased)?;
            self.validate_corpus(&s.balanced)?;
        }
        Ok(())
    }

    fn require_exists(&self, p: &Path) -> Result<()> {
        let full = self.resolve(p);
        if !full.exists() {
            return Err(Error::invalid(format!("referenced path {} does not exist", full.display())));
        }
        Ok(())
    }

    fn validate_corpus(&self, c: &CorpusSource) -> Result<()> {
        match c {
            CorpusSource::Path { sidecar } => self.require_exists(sidecar),
            CorpusSource::Synthetic { spec } => spec.validate(),
        }
    }

    /// Training config with the data-order seed set from the global seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.config.seed, ..self.config.sae.train.clone() }
    }

    pub fn ensemble_seeds(&self) -> Result<Vec<u64>> {
        let e = self.config.ensemble.as_ref().ok_or_else(|| Error::invalid("config has no ensemble section"))?;
        Ok(match &e.seeds {
            Some(s) => s.clone(),
            None => (0..e.j as u64).map(|j| self.config.seed.wrapping_add(j)).collect(),
        })
    }
}
