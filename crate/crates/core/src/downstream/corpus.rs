//! Labeled sequence corpora with planted attribute directions.
//!
//! Tokens come from the synthetic dictionary model; each sequence is a group
//! of consecutive tokens that share the sequence's binary attributes. A
//! sequence with attribute `x = 1` has `strength * direction_x` added to
//! each of its tokens with probability `token_rate`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    draw_samples, load_manifest, random_unit_columns, synthetic_dictionary, write_dataset, ActivationDataset,
    SyntheticDictionarySpec,
};
use crate::error::{check_dim, Error, Result};
use crate::rng::derive_seed;

pub const DEFAULT_GROUP_SIZE: usize = 16;

/// A named ground-truth direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConcept {
    pub name: String,
    pub direction: Vec<f64>,
}

/// Sequences of activation vectors with per-sequence binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequenceSet {
    pub sequences: Vec<Array2<f64>>,
    pub labels: BTreeMap<String, Vec<i32>>,
    pub concepts: Vec<PlantedConcept>,
}

impl LabeledSequenceSet {
    pub fn new(sequences: Vec<Array2<f64>>, labels: BTreeMap<String, Vec<i32>>) -> Result<Self> {
        let set = Self { sequences, labels, concepts: Vec::new() };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (i, s) in self.sequences.iter().enumerate() {
            if s.nrows() == 0 {
                return Err(Error::invalid(format!("sequence {i} is empty")));
            }
            check_dim(d, s.ncols())?;
        }
        for (name, v) in &self.labels {
            if v.len() != self.sequences.len() {
                return Err(Error::invalid(format!(
                    "label {name} has {} entries for {} sequences",
                    v.len(),
                    self.len()
                )));
            }
            super::logistic::check_binary(v)?;
        }
        for c in &self.concepts {
            check_dim(d, c.direction.len())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.ncols())
    }

    pub fn label(&self, name: &str) -> Result<&[i32]> {
        self.labels.get(name).map(Vec::as_slice).ok_or_else(|| Error::invalid(format!("no label named {name:?}")))
    }

    /// Copy with `name`'s labels permuted by a seeded shuffle.
    pub fn with_shuffled_label(&self, name: &str, seed: u64) -> Result<Self> {
        let mut out = self.clone();
        let order = crate::data::epoch_order(self.len(), Some(seed));
        let src = self.label(name)?;
        out.labels.insert(name.into(), order.iter().map(|&i| src[i]).collect());
        Ok(out)
    }

    /// All tokens stacked into one dataset (sequence order preserved).
    pub fn tokens(&self) -> Result<ActivationDataset> {
        let views: Vec<ArrayView2<'_, f64>> = self.sequences.iter().map(|s| s.view()).collect();
        if views.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        ActivationDataset::new(ndarray::concatenate(Axis(0), &views).expect("validated dims"))
    }

    /// Writes the tokens as activation shards plus a JSON sidecar holding
    /// sequence ranges, labels and planted concepts. Returns the sidecar path.
    pub fn save(&self, dir: &Path, stem: &str, samples_per_shard: usize, config_hash: Option<&str>) -> Result<PathBuf> {
        let tokens = self.tokens()?;
        let manifest = write_dataset(&tokens, dir, stem, samples_per_shard, config_hash)?;
        let mut ranges = Vec::with_capacity(self.len());
        let mut start = 0;
        for s in &self.sequences {
            ranges.push([start, start + s.nrows()]);
            start += s.nrows();
        }
        let sidecar = CorpusSidecar {
            format: CORPUS_FORMAT.into(),
            version: 1,
            manifest: manifest.file_name().unwrap().to_string_lossy().into_owned(),
            sequences: ranges,
            labels: self.labels.clone(),
            concepts: self.concepts.clone(),
            config_hash: config_hash.map(str::to_string),
        };
        let p = dir.join(format!("{stem}.corpus.json"));
        fs::write(&p, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn load(sidecar_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let sidecar: CorpusSidecar = serde_json::from_str(&text)?;
        let corrupt = |r: &str| Error::Corrupt { path: sidecar_path.into(), reason: r.into() };
        if sidecar.format != CORPUS_FORMAT {
            return Err(corrupt("unknown corpus format"));
        }
        let base = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
        let tokens = load_manifest(&base.join(&sidecar.manifest))?;
        let mut sequences = Vec::with_capacity(sidecar.sequences.len());
        for &[a, b] in &sidecar.sequences {
            if a >= b || b > tokens.len() {
                return Err(corrupt("sequence range out of bounds"));
            }
            sequences.push(tokens.view().slice(s![a..b, ..]).to_owned());
        }
        let set = Self { sequences, labels: sidecar.labels, concepts: sidecar.concepts };
        set.validate().map_err(|e| corrupt(&e.to_string()))?;
        Ok(set)
    }
}

pub const CORPUS_FORMAT: &str = "sae-corpus";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSidecar {
    pub format: String,
    pub version: u32,
    pub manifest: String,
    /// Half-open token ranges `[start, end)` per sequence.
    pub sequences: Vec<[usize; 2]>,
    pub labels: BTreeMap<String, Vec<i32>>,
    pub concepts: Vec<PlantedConcept>,
    pub config_hash: Option<String>,
}

/// One binary attribute planted along its own random unit direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedAttribute {
    pub name: String,
    pub strength: f64,
    /// Probability that a token of a positive sequence carries the direction.
    #[serde(default = "default_rate")]
    pub token_rate: f64,
}

fn default_rate() -> f64 {
    1.0
}

/// Synthetic corpus description. Directions and the token dictionary depend
/// only on `base.seed`; sequences and labels on `sample_seed`. Two corpora
/// with the same `base` therefore share their ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub base: SyntheticDictionarySpec,
    pub n_sequences: usize,
    #[serde(default = "default_group")]
    pub group_size: usize,
    pub attributes: Vec<PlantedAttribute>,
    /// Probability that every attribute after the first equals the first.
    /// `None` draws each attribute independently with probability 1/2.
    #[serde(default)]
    pub agreement: Option<f64>,
    pub sample_seed: u64,
}

fn default_group() -> usize {
    DEFAULT_GROUP_SIZE
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.attributes.len() > self.base.dim {
            return Err(Error::invalid("more attributes than dimensions"));
        }
        if self.n_sequences == 0 || self.group_size == 0 {
            return Err(Error::invalid("corpus needs at least one non-empty sequence"));
        }
        if let Some(p) = self.agreement {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("agreement must lie in [0, 1]"));
            }
        }
        for a in &self.attributes {
            if !a.strength.is_finite() {
                return Err(Error::invalid("attribute strength must be finite"));
            }
            if !(a.token_rate > 0.0 && a.token_rate <= 1.0) {
                return Err(Error::invalid("attribute token_rate must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Mutually orthogonal unit directions for the attributes, in order.
    pub fn directions(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.base.seed, 0xA77));
        let mut m = random_unit_columns(&mut rng, self.base.dim, self.attributes.len());
        // modified Gram-Schmidt
        for j in 0..m.ncols() {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let prev = m.column(i).to_owned();
                m.column_mut(j).scaled_add(-proj, &prev);
            }
            let norm = m.column(j).dot(&m.column(j)).sqrt();
            m.column_mut(j).mapv_inplace(|v| v / norm);
        }
        m
    }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<LabeledSequenceSet> {
    spec.validate()?;
    let dictionary = synthetic_dictionary(&spec.base)?;
    let directions = spec.directions();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed);
    let n_attr = spec.attributes.len();
    let mut labels: Vec<Vec<i32>> = vec![Vec::with_capacity(spec.n_sequences); n_attr];
    let mut sequences = Vec::with_capacity(spec.n_sequences);
    for _ in 0..spec.n_sequences {
        let mut flags = Vec::<bool>::with_capacity(n_attr);
        for a in 0..n_attr {
            let bit = match (a, spec.agreement) {
                (0, _) | (_, None) => rng.random_bool(0.5),
                (_, Some(p)) => {
                    let same = rng.random_bool(p);
                    if same {
                        flags[0]
                    } else {
                        !flags[0]
                    }
                }
            };
            flags.push(bit);
        }
        let (mut tokens, _) = draw_samples(&spec.base, &dictionary, spec.group_size, &mut rng);
        for (a, &on) in flags.iter().enumerate() {
            labels[a].push(i32::from(on));
            if on {
                let attr = &spec.attributes[a];
                let add = &directions.column(a) * attr.strength;
                for mut row in tokens.rows_mut() {
                    if attr.token_rate >= 1.0 || rng.random_bool(attr.token_rate) {
                        row += &add;
                    }
                }
            }
        }
        sequences.push(tokens);
    }
    let concepts = spec
        .attributes
        .iter()
        .enumerate()
        .map(|(a, attr)| PlantedConcept { name: attr.name.clone(), direction: directions.column(a).to_vec() })
        .collect();
    let labels = spec.attributes.iter().map(|a| a.name.clone()).zip(labels).collect();
    let set = LabeledSequenceSet { sequences, labels, concepts };
    set.validate()?;
    Ok(set)
}
