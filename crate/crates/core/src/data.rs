//! Activation datasets: in-memory storage, the binary shard format, batch
//! streaming and a synthetic generator with a known ground-truth dictionary.
//!
//! Shard layout (all integers little-endian):
//!
//! ```text
//! "SAEA" | version: u16 = 1 | d: u32 | count: u32 | count*d f32 | crc32(payload): u32
//! ```
//!
//! A manifest JSON file lists the shards in order, the dimension and total
//! count, and optional label files (one little-endian `i32` per sample).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"SAEA";
pub const SHARD_VERSION: u16 = 1;
const SHARD_HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// One shard on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardDescriptor {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub count: usize,
}

/// A set of `d`-dimensional activation vectors with optional per-sample labels.
///
/// Samples are held in memory as `f64`; shards on disk store `f32`.
#[derive(Debug)]
pub struct ActivationDataset {
    data: Array2<f64>,
    labels: BTreeMap<String, Vec<i32>>,
    shards: Vec<ShardDescriptor>,
    mean_cache: OnceLock<Array1<f64>>,
}

impl Clone for ActivationDataset {
    fn clone(&self) -> Self {
        let mean_cache = OnceLock::new();
        if let Some(m) = self.mean_cache.get() {
            let _ = mean_cache.set(m.clone());
        }
        Self { data: self.data.clone(), labels: self.labels.clone(), shards: self.shards.clone(), mean_cache }
    }
}

impl ActivationDataset {
    /// Wraps an `N x d` matrix. Every entry must be finite and `d >= 1`.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::invalid("activation dimension must be positive"));
        }
        if let Some((idx, _)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let d = data.ncols();
            return Err(Error::invalid(format!("non-finite activation at sample {} dim {}", idx / d, idx % d)));
        }
        Ok(Self { data, labels: BTreeMap::new(), shards: Vec::new(), mean_cache: OnceLock::new() })
    }

    /// An empty dataset of the given dimension.
    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Array2::zeros((0, dim)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or_else(|| Error::invalid("no rows"))?;
        let mut data = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            crate::error::check_dim(d, r.len())?;
            data.row_mut(i).assign(&ArrayView1::from(r.as_slice()));
        }
        Self::new(data)
    }

    pub fn with_labels(mut self, name: impl Into<String>, labels: Vec<i32>) -> Result<Self> {
        crate::error::check_dim(self.len(), labels.len())?;
        self.labels.insert(name.into(), labels);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn sample(&self, n: usize) -> ArrayView1<'_, f64> {
        self.data.row(n)
    }

    pub fn labels(&self) -> &BTreeMap<String, Vec<i32>> {
        &self.labels
    }

    pub fn label(&self, name: &str) -> Option<&[i32]> {
        self.labels.get(name).map(Vec::as_slice)
    }

    /// Shards this dataset was loaded from or last written to.
    pub fn shards(&self) -> &[ShardDescriptor] {
        &self.shards
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    /// Rows `start..end` as a new dataset (labels sliced alongside).
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::invalid(format!("bad slice {start}..{end} of {}", self.len())));
        }
        let mut out = Self::new(self.data.slice(s![start..end, ..]).to_owned())?;
        for (k, v) in &self.labels {
            out.labels.insert(k.clone(), v[start..end].to_vec());
        }
        Ok(out)
    }

    /// Per-dimension mean, computed in one streaming pass and cached.
    pub fn per_dim_mean(&self) -> Result<Array1<f64>> {
        if self.is_empty() {
            return Err(Error::invalid("per-dimension mean of an empty dataset"));
        }
        if let Some(m) = self.mean_cache.get() {
            return Ok(m.clone());
        }
        let m = streaming_mean(self.data.rows().into_iter(), self.dim());
        let _ = self.mean_cache.set(m.clone());
        Ok(m)
    }

    /// Iterates over batches of at most `batch_size` rows. With a shuffle
    /// seed the epoch order is a seeded permutation of sample indices;
    /// without one it is storage order.
    pub fn stream_batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchIter<'_>> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        let order = epoch_order(self.len(), shuffle_seed);
        Ok(BatchIter { data: self.data.view(), order, batch_size, pos: 0 })
    }
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Fisher-Yates, spelled out so the permutation is stable across rand releases.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
    }
    order
}

/// Compensated running mean over rows.
fn streaming_mean<'a, I>(rows: I, d: usize) -> Array1<f64>
where
    I: Iterator<Item = ArrayView1<'a, f64>>,
{
    let mut sum = vec![0.0f64; d];
    let mut comp = vec![0.0f64; d];
    let mut n = 0usize;
    for row in rows {
        for (q, &x) in row.iter().enumerate() {
            // Neumaier summation
            let t = sum[q] + x;
            if sum[q].abs() >= x.abs() {
                comp[q] += (sum[q] - t) + x;
            } else {
                comp[q] += (x - t) + sum[q];
            }
            sum[q] = t;
        }
        n += 1;
    }
    Array1::from_iter(sum.iter().zip(&comp).map(|(s, c)| (s + c) / n as f64))
}

pub struct BatchIter<'a> {
    data: ArrayView2<'a, f64>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Array2<f64>;

    fn next(&mut self) -> Option<Array2<f64>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.select(Axis(0), &self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

// ---------------------------------------------------------------------------
// Shard I/O
// ---------------------------------------------------------------------------

/// Writes one shard file holding `rows` as little-endian `f32`.
pub fn write_shard(path: &Path, rows: ArrayView2<'_, f64>) -> Result<()> {
    let d = u32::try_from(rows.ncols()).map_err(|_| Error::invalid("dimension exceeds u32"))?;
    let count = u32::try_from(rows.nrows()).map_err(|_| Error::invalid("shard count exceeds u32"))?;
    let mut payload = Vec::with_capacity(rows.len() * 4);
    for &v in rows.iter() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| {
        w.write_all(SHARD_MAGIC)?;
        w.write_all(&SHARD_VERSION.to_le_bytes())?;
        w.write_all(&d.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&payload)?;
        w.write_all(&crc.to_le_bytes())?;
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Reads one shard, verifying magic, version, length and checksum.
pub fn read_shard(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < SHARD_HEADER_LEN + 4 {
        return Err(corrupt("truncated header"));
    }
    if &bytes[0..4] != SHARD_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SHARD_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let d = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload_len = count * d * 4;
    if bytes.len() != SHARD_HEADER_LEN + payload_len + 4 {
        return Err(corrupt("length does not match header"));
    }
    let payload = &bytes[SHARD_HEADER_LEN..SHARD_HEADER_LEN + payload_len];
    let stored = u32::from_le_bytes(bytes[SHARD_HEADER_LEN + payload_len..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let values: Vec<f64> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Array2::from_shape_vec((count, d), values).map_err(|e| corrupt(&e.to_string()))
}

/// Manifest describing a sharded dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub count: usize,
    pub shards: Vec<ShardDescriptor>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_version: Option<String>,
}

pub const MANIFEST_FORMAT: &str = "saea-manifest";

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Corrupt { path: path.into(), reason: format!("unknown format {:?}", m.format) });
        }
        let total: usize = m.shards.iter().map(|s| s.count).sum();
        if total != m.count {
            return Err(Error::Corrupt {
                path: path.into(),
                reason: format!("count {} != sum of shard counts {total}", m.count),
            });
        }
        Ok(m)
    }
}

/// Splits `dataset` into shards of `samples_per_shard` rows named
/// `{stem}_{i:05}.saea` inside `dir`.
pub fn write_shards(
    dataset: &ActivationDataset,
    dir: &Path,
    stem: &str,
    samples_per_shard: usize,
) -> Result<Vec<ShardDescriptor>> {
    if samples_per_shard == 0 {
        return Err(Error::invalid("samples_per_shard must be >= 1"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + samples_per_shard).min(dataset.len());
        let name = format!("{stem}_{:05}.saea", out.len());
        write_shard(&dir.join(&name), dataset.data.slice(s![start..end, ..]))?;
        out.push(ShardDescriptor { path: name, count: end - start });
        start = end;
    }
    Ok(out)
}

/// Writes shards, label files and a manifest; returns the manifest path.
pub fn write_dataset(
    dataset: &ActivationDataset,
    dir: &Path,
    stem: &str,
    samples_per_shard: usize,
    config_hash: Option<&str>,
) -> Result<PathBuf> {
    let shards = write_shards(dataset, dir, stem, samples_per_shard)?;
    let mut labels = BTreeMap::new();
    for (name, values) in &dataset.labels {
        let file = format!("{stem}.{name}.i32");
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let p = dir.join(&file);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        labels.insert(name.clone(), file);
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: 1,
        dim: dataset.dim(),
        count: dataset.len(),
        shards,
        labels,
        config_hash: config_hash.map(str::to_string),
        generator_version: Some(crate::VERSION.to_string()),
    };
    let path = dir.join(format!("{stem}.manifest.json"));
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a sharded dataset listed by a manifest.
pub fn load_manifest(path: &Path) -> Result<ActivationDataset> {
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut data = Array2::zeros((0, manifest.dim));
    for shard in &manifest.shards {
        let p = base.join(&shard.path);
        let block = read_shard(&p)?;
        if block.ncols() != manifest.dim || block.nrows() != shard.count {
            return Err(Error::Corrupt { path: p, reason: "shard shape disagrees with manifest".into() });
        }
        data.append(Axis(0), block.view()).expect("column count checked");
    }
    let mut ds = ActivationDataset::new(data)?;
    ds.shards = manifest.shards.clone();
    for (name, file) in &manifest.labels {
        let p = base.join(file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != 4 * manifest.count {
            return Err(Error::Corrupt { path: p, reason: "label file length".into() });
        }
        let values = bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
        ds.labels.insert(name.clone(), values);
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoeffDistribution {
    Uniform { low: f64, high: f64 },
}

/// Generative model `a = D z + bias + noise` with a unit-norm random dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDictionarySpec {
    pub dim: usize,
    pub true_feature_count: usize,
    pub active_per_sample: usize,
    pub coeff_distribution: CoeffDistribution,
    pub noise_std: f64,
    /// Empty means zero bias.
    #[serde(default)]
    pub bias: Vec<f64>,
    pub seed: u64,
}

impl SyntheticDictionarySpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("synthetic dim must be positive"));
        }
        if self.true_feature_count == 0 {
            return Err(Error::invalid("true_feature_count must be positive"));
        }
        if self.active_per_sample == 0 || self.active_per_sample > self.true_feature_count {
            return Err(Error::invalid(format!(
                "active_per_sample must be in 1..={}, got {}",
                self.true_feature_count, self.active_per_sample
            )));
        }
        let CoeffDistribution::Uniform { low, high } = self.coeff_distribution;
        if !(low.is_finite() && high.is_finite()) || low < 0.0 || low > high {
            return Err(Error::invalid(format!("coefficient range [{low}, {high}] must be non-negative and ordered")));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std must be finite and non-negative"));
        }
        if !self.bias.is_empty() && self.bias.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: self.bias.len() });
        }
        Ok(())
    }

    fn bias_vec(&self) -> Array1<f64> {
        if self.bias.is_empty() {
            Array1::zeros(self.dim)
        } else {
            Array1::from(self.bias.clone())
        }
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: ActivationDataset,
    /// `d x K_true`, unit-norm columns.
    pub dictionary: Array2<f64>,
    /// `N x K_true` ground-truth codes.
    pub codes: Array2<f64>,
}

/// Draws a `rows x cols` Gaussian matrix and normalizes every column.
pub fn random_unit_columns(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal));
    for mut col in m.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col /= norm;
        } else {
            col[0] = 1.0;
        }
    }
    m
}

pub fn generate_synthetic(spec: &SyntheticDictionarySpec, n: usize) -> Result<SyntheticData> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("synthetic sample count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dictionary = random_unit_columns(&mut rng, spec.dim, spec.true_feature_count);
    let (data, codes) = draw_samples(spec, &dictionary, n, &mut rng);
    Ok(SyntheticData { dataset: ActivationDataset::new(data)?, dictionary, codes })
}

/// The ground-truth dictionary [`generate_synthetic`] would use for `spec`.
pub fn synthetic_dictionary(spec: &SyntheticDictionarySpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(random_unit_columns(&mut rng, spec.dim, spec.true_feature_count))
}

/// Draws `n` samples `D z + bias + noise` from `rng`; returns the samples
/// and their codes.
pub fn draw_samples(
    spec: &SyntheticDictionarySpec,
    dictionary: &Array2<f64>,
    n: usize,
    rng: &mut impl Rng,
) -> (Array2<f64>, Array2<f64>) {
    let d = spec.dim;
    let kt = spec.true_feature_count;
    let bias = spec.bias_vec();
    let CoeffDistribution::Uniform { low, high } = spec.coeff_distribution;
    let mut data = Array2::zeros((n, d));
    let mut codes = Array2::zeros((n, kt));
    for i in 0..n {
        let mut idx = sample(rng, kt, spec.active_per_sample).into_vec();
        idx.sort_unstable();
        let mut row = data.row_mut(i);
        row.assign(&bias);
        for &j in &idx {
            let z = if high > low { rng.random_range(low..high) } else { low };
            codes[[i, j]] = z;
            row.scaled_add(z, &dictionary.column(j));
        }
        if spec.noise_std > 0.0 {
            for v in row.iter_mut() {
                *v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    (data, codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: usize, kt: usize, active: usize, low: f64, high: f64, noise: f64, seed: u64) -> SyntheticDictionarySpec {
        SyntheticDictionarySpec {
            dim: d,
            true_feature_count: kt,
            active_per_sample: active,
            coeff_distribution: CoeffDistribution::Uniform { low, high },
            noise_std: noise,
            bias: vec![],
            seed,
        }
    }

    #[test]
    fn one_hot_noiseless_sample_is_a_dictionary_column() {
        let s = spec(4, 4, 1, 1.0, 1.0, 0.0, 3);
        let out = generate_synthetic(&s, 1).unwrap();
        let a = out.dataset.sample(0);
        let hit = (0..4).any(|j| out.dictionary.column(j).iter().zip(a.iter()).all(|(x, y)| x == y));
        assert!(hit);
        for col in out.dictionary.columns() {
            assert!((col.dot(&col) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_samples_lie_in_shifted_column_space() {
        let mut s = spec(6, 4, 2, 0.5, 1.5, 0.0, 11);
        s.bias = vec![0.3, -0.2, 0.1, 0.0, 1.0, -1.0];
        let out = generate_synthetic(&s, 1000).unwrap();
        // Least squares projection onto span(D) via normal equations (4x4 solve).
        let dmat = &out.dictionary;
        let gram = dmat.t().dot(dmat);
        let bias = Array1::from(s.bias.clone());
        for n in 0..1000 {
            let r = &out.dataset.sample(n) - &bias;
            let rhs = dmat.t().dot(&r);
            let z = solve_spd(&gram, &rhs);
            let resid = &r - &dmat.dot(&z);
            assert!(resid.dot(&resid).sqrt() < 1e-9);
        }
    }

    fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
        // Gaussian elimination with partial pivoting, test-only.
        let n = b.len();
        let mut m = a.clone();
        let mut x = b.clone();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs())).unwrap();
            for k in 0..n {
                m.swap([c, k], [p, k]);
            }
            x.swap(c, p);
            for r in c + 1..n {
                let f = m[[r, c]] / m[[c, c]];
                for k in c..n {
                    m[[r, k]] -= f * m[[c, k]];
                }
                x[r] -= f * x[c];
            }
        }
        for c in (0..n).rev() {
            for k in c + 1..n {
                x[c] -= m[[c, k]] * x[k];
            }
            x[c] /= m[[c, c]];
        }
        x
    }

    #[test]
    fn noise_energy_matches_expectation() {
        let s = spec(8, 16, 3, 0.5, 1.5, 0.01, 7);
        let out = generate_synthetic(&s, 10_000).unwrap();
        let clean = out.codes.dot(&out.dictionary.t());
        let diff = out.dataset.view().to_owned() - clean;
        let mean_energy = diff.mapv(|v| v * v).sum() / 10_000.0;
        let expected = 8.0 * 0.01f64.powi(2);
        assert!((mean_energy - expected).abs() / expected < 0.10, "{mean_energy}");
        for row in out.codes.rows() {
            assert_eq!(row.iter().filter(|v| **v != 0.0).count(), 3);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_synthetic(&spec(0, 4, 1, 1.0, 1.0, 0.0, 0), 5).is_err());
        assert!(generate_synthetic(&spec(4, 4, 5, 1.0, 1.0, 0.0, 0), 5).is_err());
        assert!(generate_synthetic(&spec(4, 4, 1, 1.0, 1.0, 0.0, 0), 0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(8, 16, 3, 0.5, 1.5, 0.01, 99);
        let a = generate_synthetic(&s, 200).unwrap();
        let b = generate_synthetic(&s, 200).unwrap();
        assert_eq!(a.dataset.view(), b.dataset.view());
    }

    #[test]
    fn shard_sizes_follow_ceiling_division() {
        let dir = tempfile::tempdir().unwrap();
        let ds = ActivationDataset::new(Array2::from_shape_fn((10, 3), |(i, j)| (i * 3 + j) as f64)).unwrap();
        let shards = write_shards(&ds, dir.path(), "s", 4).unwrap();
        let counts: Vec<_> = shards.iter().map(|s| s.count).collect();
        assert_eq!(counts, vec![4, 4, 2]);
    }

    #[test]
    fn empty_dataset_writes_header_only_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = ActivationDataset::empty(5).unwrap();
        let path = write_dataset(&ds, dir.path(), "e", 4, None).unwrap();
        let m = Manifest::read(&path).unwrap();
        assert!(m.shards.is_empty());
        assert_eq!((m.dim, m.count), (5, 0));
        let loaded = load_manifest(&path).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn corrupt_shard_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.saea");
        write_shard(&p, Array2::from_elem((2, 2), 1.5).view()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[SHARD_HEADER_LEN] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_shard(&p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let ds = ActivationDataset::new(Array2::from_shape_fn((10, 2), |(i, _)| i as f64)).unwrap();
        let sizes: Vec<_> = ds.stream_batches(4, None).unwrap().map(|b| b.nrows()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let flat: Vec<f64> = ds.stream_batches(4, None).unwrap().flat_map(|b| b.column(0).to_vec()).collect();
        assert_eq!(flat, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        let a: Vec<f64> = ds.stream_batches(3, Some(5)).unwrap().flat_map(|b| b.column(0).to_vec()).collect();
        let b: Vec<f64> = ds.stream_batches(3, Some(5)).unwrap().flat_map(|b| b.column(0).to_vec()).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, flat);
        assert!(ds.stream_batches(0, None).is_err());
    }

    #[test]
    fn per_dim_mean_cases() {
        let ds = ActivationDataset::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(ds.per_dim_mean().unwrap().to_vec(), vec![2.0, 3.0]);
        let c = ActivationDataset::new(Array2::from_elem((7, 3), 0.25)).unwrap();
        assert_eq!(c.per_dim_mean().unwrap().to_vec(), vec![0.25; 3]);
        assert!(ActivationDataset::empty(3).unwrap().per_dim_mean().is_err());

        let s = spec(8, 16, 3, 0.5, 1.5, 0.1, 1);
        let out = generate_synthetic(&s, 10_000).unwrap();
        let m = out.dataset.per_dim_mean().unwrap();
        // naive two-pass oracle
        for q in 0..8 {
            let naive: f64 = (0..10_000).map(|n| out.dataset.sample(n)[q]).sum::<f64>() / 10_000.0;
            assert!((m[q] - naive).abs() <= 1e-10 * naive.abs().max(1e-300));
        }
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(ActivationDataset::from_rows(&[vec![1.0, f64::NAN]]).is_err());
    }
}
