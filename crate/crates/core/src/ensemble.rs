//! Naive bagging and boosting over single SAEs, and the flatten operation
//! that realizes any ensemble as one SAE with concatenated features.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ActivationDataset;
use crate::error::{check_dim, Error, Result};
use crate::sae::{
    load_checkpoint, save_checkpoint, train_with_transform, Activation, CheckpointMeta, SaeParams, TrainConfig,
    TrainLog,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    NaiveBagging,
    Boosting,
}

impl EnsembleKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnsembleKind::NaiveBagging => "naive_bagging",
            EnsembleKind::Boosting => "boosting",
        }
    }

    /// Structural weight of every member for an ensemble of size `j`.
    pub fn weight(&self, j: usize) -> f64 {
        match self {
            EnsembleKind::NaiveBagging => 1.0 / j as f64,
            EnsembleKind::Boosting => 1.0,
        }
    }
}

/// An ordered list of shape-compatible SAEs with non-negative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    kind: EnsembleKind,
    members: Vec<SaeParams>,
    weights: Vec<f64>,
    seeds: Vec<u64>,
}

fn same_architecture(a: &SaeParams, b: &SaeParams) -> bool {
    let act = match (a.activation, b.activation) {
        (Activation::Relu, Activation::Relu) => true,
        (Activation::Topk { k: x }, Activation::Topk { k: y }) => x == y,
        (Activation::Jumprelu { bandwidth: x }, Activation::Jumprelu { bandwidth: y }) => x == y,
        _ => false,
    };
    act && a.d() == b.d() && a.k() == b.k() && a.lambda == b.lambda
}

impl Ensemble {
    /// Builds an ensemble with the weights prescribed by `kind`
    /// (`1/J` for bagging, `1` for boosting).
    pub fn new(kind: EnsembleKind, members: Vec<SaeParams>, seeds: Vec<u64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        if seeds.len() != members.len() {
            return Err(Error::invalid("one seed per member required"));
        }
        for m in &members {
            m.validate()?;
            if !same_architecture(&members[0], m) {
                return Err(Error::invalid("ensemble members must share d, k, activation and lambda"));
            }
        }
        let weights = vec![kind.weight(members.len()); members.len()];
        Ok(Self { kind, members, weights, seeds })
    }

    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    pub fn members(&self) -> &[SaeParams] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn d(&self) -> usize {
        self.members[0].d()
    }

    /// Total feature count `kJ`.
    pub fn feature_count(&self) -> usize {
        self.members[0].k() * self.members.len()
    }

    /// Mean of member reconstructions of the same inputs.
    pub fn bag_reconstruct_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if self.kind != EnsembleKind::NaiveBagging {
            return Err(Error::invalid("bag_reconstruct on a boosting ensemble"));
        }
        let mut out = Array2::zeros((x.nrows(), self.d()));
        for (m, &w) in self.members.iter().zip(&self.weights) {
            out.scaled_add(w, &m.reconstruct_batch(x)?);
        }
        Ok(out)
    }

    /// Sum of member reconstructions, each applied to the residual left by
    /// the members before it.
    pub fn boost_reconstruct_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if self.kind != EnsembleKind::Boosting {
            return Err(Error::invalid("boost_reconstruct on a bagging ensemble"));
        }
        check_dim(self.d(), x.ncols())?;
        let mut residual = x.to_owned();
        let mut out = Array2::zeros(x.raw_dim());
        for (m, &w) in self.members.iter().zip(&self.weights) {
            let part = m.reconstruct_batch(residual.view())?;
            residual -= &part;
            out.scaled_add(w, &part);
        }
        Ok(out)
    }

    pub fn bag_reconstruct(&self, a: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.bag_reconstruct_batch(a.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    pub fn boost_reconstruct(&self, a: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.boost_reconstruct_batch(a.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// Reconstruction by the ensemble's own definition.
    pub fn reconstruct_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self.kind {
            EnsembleKind::NaiveBagging => self.bag_reconstruct_batch(x),
            EnsembleKind::Boosting => self.boost_reconstruct_batch(x),
        }
    }

    /// Weight-scaled member codes stacked in member order (`B x kJ`).
    /// Boosting members encode the residual they were trained on.
    pub fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(self.d(), x.ncols())?;
        let k = self.members[0].k();
        let mut out = Array2::zeros((x.nrows(), self.feature_count()));
        let mut residual = x.to_owned();
        for (j, (m, &w)) in self.members.iter().zip(&self.weights).enumerate() {
            let c = m.encode_batch(residual.view())?;
            if self.kind == EnsembleKind::Boosting && j + 1 < self.members.len() {
                residual -= &m.decode_batch(c.view())?;
            }
            out.slice_mut(s![.., j * k..(j + 1) * k]).assign(&(c * w));
        }
        Ok(out)
    }

    pub fn encode(&self, a: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.encode_batch(a.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// Concatenated decoder and weighted decoder-bias sum.
    pub fn flatten(&self) -> FlattenedSae {
        let views: Vec<_> = self.members.iter().map(|m| m.w_dec.view()).collect();
        let w_dec_cat = concatenate(Axis(1), &views).expect("members share d");
        let mut b_dec_sum = Array1::zeros(self.d());
        for (m, &w) in self.members.iter().zip(&self.weights) {
            b_dec_sum.scaled_add(w, &m.b_dec);
        }
        FlattenedSae { w_dec_cat, b_dec_sum, weights: self.weights.clone() }
    }

    /// Residual targets seen by member `j` (0-based) for inputs `x`.
    pub fn residual_for_member(&self, j: usize, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        residual_through(&self.members[..j.min(self.members.len())], x.to_owned())
    }

    pub fn save(&self, dir: &Path, train_config: Option<&TrainConfig>, config_hash: Option<&str>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (j, m) in self.members.iter().enumerate() {
            let name = format!("member_{j:02}.sae");
            let meta = CheckpointMeta {
                init_seed: Some(self.seeds[j]),
                data_seed: train_config.map(|c| c.seed),
                train_config: train_config.cloned(),
                config_hash: config_hash.map(str::to_string),
            };
            save_checkpoint(&dir.join(&name), m, &meta)?;
            files.push(name);
        }
        let manifest = EnsembleManifest {
            format: ENSEMBLE_FORMAT.into(),
            version: 1,
            crate_version: crate::VERSION.into(),
            kind: self.kind,
            j: self.len(),
            weights: self.weights.clone(),
            members: files,
            seeds: self.seeds.clone(),
            train_config: train_config.cloned(),
            config_hash: config_hash.map(str::to_string),
        };
        let p = dir.join(ENSEMBLE_MANIFEST);
        fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(ENSEMBLE_MANIFEST);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text)?;
        if manifest.format != ENSEMBLE_FORMAT || manifest.members.len() != manifest.j {
            return Err(Error::Corrupt { path: p, reason: "bad ensemble manifest".into() });
        }
        let members = manifest
            .members
            .iter()
            .map(|f| load_checkpoint(&dir.join(f)).map(|(params, _)| params))
            .collect::<Result<Vec<_>>>()?;
        let ens = Self::new(manifest.kind, members, manifest.seeds)?;
        if ens.weights != manifest.weights {
            return Err(Error::Corrupt { path: p, reason: "weights disagree with ensemble kind".into() });
        }
        Ok(ens)
    }
}

pub const ENSEMBLE_FORMAT: &str = "sae-ensemble";
pub const ENSEMBLE_MANIFEST: &str = "ensemble.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub kind: EnsembleKind,
    #[serde(rename = "J")]
    pub j: usize,
    pub weights: Vec<f64>,
    pub members: Vec<String>,
    pub seeds: Vec<u64>,
    pub train_config: Option<TrainConfig>,
    pub config_hash: Option<String>,
}

/// An ensemble realized as one SAE: decoder `d x kJ` and a single bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedSae {
    pub w_dec_cat: Array2<f64>,
    pub b_dec_sum: Array1<f64>,
    pub weights: Vec<f64>,
}

impl FlattenedSae {
    /// `c_cat W_dec_cat^T + b_dec_sum` with codes from [`Ensemble::encode_batch`].
    pub fn decode_batch(&self, codes: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(self.w_dec_cat.ncols(), codes.ncols())?;
        Ok(codes.dot(&self.w_dec_cat.t()) + &self.b_dec_sum)
    }

    pub fn reconstruct_batch(&self, ensemble: &Ensemble, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let c = ensemble.encode_batch(x)?;
        self.decode_batch(c.view())
    }
}

fn residual_through(prefix: &[SaeParams], mut r: Array2<f64>) -> Result<Array2<f64>> {
    for m in prefix {
        let part = m.reconstruct_batch(r.view())?;
        r -= &part;
    }
    Ok(r)
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::invalid("J must be >= 1"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("ensemble seeds must be pairwise distinct"));
    }
    Ok(())
}

/// Trains `seeds.len()` SAEs on the same data in the same order, differing
/// only in initialization. Members are spread over up to `parallel`
/// threads; the result does not depend on the thread count.
pub fn bag_train(
    data: &ActivationDataset,
    config: &TrainConfig,
    activation: Activation,
    k: usize,
    seeds: &[u64],
    parallel: usize,
) -> Result<(Ensemble, Vec<TrainLog>)> {
    check_seeds(seeds)?;
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mean = data.per_dim_mean()?;
    let train_one = |seed: u64| train_with_transform(data, config, activation, k, seed, Some(mean.clone()), &|b| Ok(b));

    let threads = parallel.max(1).min(seeds.len());
    let results: Vec<Result<(SaeParams, TrainLog)>> = if threads == 1 {
        seeds.iter().map(|&s| train_one(s)).collect()
    } else {
        let mut slots: Vec<Option<Result<(SaeParams, TrainLog)>>> = (0..seeds.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunk = seeds.len().div_ceil(threads);
            for (seed_chunk, slot_chunk) in seeds.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                let train_one = &train_one;
                scope.spawn(move || {
                    for (s, slot) in seed_chunk.iter().zip(slot_chunk.iter_mut()) {
                        *slot = Some(train_one(*s));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every member trained")).collect()
    };
    let (members, logs): (Vec<_>, Vec<_>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok((Ensemble::new(EnsembleKind::NaiveBagging, members, seeds.to_vec())?, logs))
}

/// Trains members sequentially, member `j` on the residual left by members
/// `1..j`. Residuals are recomputed from the frozen prefix for every batch,
/// or materialized once per member when `cache_residuals` is set.
pub fn boost_train(
    data: &ActivationDataset,
    config: &TrainConfig,
    activation: Activation,
    k: usize,
    seeds: &[u64],
    cache_residuals: bool,
) -> Result<(Ensemble, Vec<TrainLog>)> {
    check_seeds(seeds)?;
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut members: Vec<SaeParams> = Vec::with_capacity(seeds.len());
    let mut logs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (params, log) = if members.is_empty() {
            train_with_transform(data, config, activation, k, seed, Some(data.per_dim_mean()?), &|b| Ok(b))?
        } else if cache_residuals {
            let residuals = ActivationDataset::new(residual_through(&members, data.view().to_owned())?)?;
            let mean = residuals.per_dim_mean()?;
            train_with_transform(&residuals, config, activation, k, seed, Some(mean), &|b| Ok(b))?
        } else {
            let mean = residual_mean(&members, data, config.batch_size)?;
            let prefix = &members;
            train_with_transform(data, config, activation, k, seed, Some(mean), &|b| residual_through(prefix, b))?
        };
        members.push(params);
        logs.push(log);
    }
    Ok((Ensemble::new(EnsembleKind::Boosting, members, seeds.to_vec())?, logs))
}

fn residual_mean(prefix: &[SaeParams], data: &ActivationDataset, chunk: usize) -> Result<Array1<f64>> {
    let mut sum = Array1::zeros(data.dim());
    for batch in data.stream_batches(chunk.max(1), None)? {
        sum += &residual_through(prefix, batch)?.sum_axis(Axis(0));
    }
    Ok(sum / data.len() as f64)
}

/// Anything that can be evaluated: a single SAE or an ensemble.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Single(SaeParams),
    Ensemble(Ensemble),
}

impl Target {
    pub fn d(&self) -> usize {
        match self {
            Target::Single(p) => p.d(),
            Target::Ensemble(e) => e.d(),
        }
    }

    /// Total number of features `m`.
    pub fn feature_count(&self) -> usize {
        match self {
            Target::Single(p) => p.k(),
            Target::Ensemble(e) => e.feature_count(),
        }
    }

    /// Number of SAEs `J` (1 for a single SAE).
    pub fn members(&self) -> usize {
        match self {
            Target::Single(_) => 1,
            Target::Ensemble(e) => e.len(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Target::Single(_) => "single",
            Target::Ensemble(e) => e.kind().name(),
        }
    }

    /// Feature directions as columns, `d x m`.
    pub fn features(&self) -> Array2<f64> {
        match self {
            Target::Single(p) => p.w_dec.clone(),
            Target::Ensemble(e) => e.flatten().w_dec_cat,
        }
    }

    /// Coefficients in the (flattened) feature space, `B x m`.
    pub fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self {
            Target::Single(p) => p.encode_batch(x),
            Target::Ensemble(e) => e.encode_batch(x),
        }
    }

    /// Reconstruction by the target's own definition.
    pub fn reconstruct_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match self {
            Target::Single(p) => p.reconstruct_batch(x),
            Target::Ensemble(e) => e.reconstruct_batch(x),
        }
    }

    /// Loads either an SAE checkpoint file or an ensemble directory.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Ok(Target::Ensemble(Ensemble::load(path)?))
        } else {
            Ok(Target::Single(load_checkpoint(path)?.0))
        }
    }
}
