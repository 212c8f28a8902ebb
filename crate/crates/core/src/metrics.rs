//! Intrinsic metrics: reconstruction (MSE, explained variance), relative
//! sparsity, diversity, connectivity and cross-run stability.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{s, Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::ActivationDataset;
use crate::ensemble::Target;
use crate::error::{check_dim, Error, Result};

/// Magnitudes below this are treated as exact zeros when coefficients are
/// stored.
pub const ZERO_FLUSH: f64 = 1e-12;

/// Default diversity threshold.
pub const DEFAULT_TAU: f64 = 0.7;

/// Tolerance on decoder column norms accepted by the cosine-based metrics.
pub const UNIT_NORM_TOL: f64 = 1e-6;

const BLOCK: usize = 256;
const EVAL_CHUNK: usize = 4096;

/// Row-compressed `N x m` coefficient matrix without stored zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl CoefficientMatrix {
    pub fn new(cols: usize) -> Self {
        Self { cols, row_ptr: vec![0], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn from_dense(c: ArrayView2<'_, f64>) -> Self {
        let mut m = Self::new(c.ncols());
        m.push_rows(c);
        m
    }

    /// Appends rows, dropping entries with magnitude below [`ZERO_FLUSH`].
    pub fn push_rows(&mut self, c: ArrayView2<'_, f64>) {
        assert_eq!(c.ncols(), self.cols, "column count");
        for row in c.rows() {
            self.push_row(row);
        }
    }

    pub fn push_row(&mut self, row: ArrayView1<'_, f64>) {
        for (j, &v) in row.iter().enumerate() {
            if v.abs() >= ZERO_FLUSH {
                self.col_idx.push(j as u32);
                self.values.push(v);
            }
        }
        self.row_ptr.push(self.col_idx.len());
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored `(column, value)` pairs of row `n`.
    pub fn row(&self, n: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[n], self.row_ptr[n + 1]);
        self.col_idx[a..b].iter().map(|&j| j as usize).zip(self.values[a..b].iter().copied())
    }
}

/// `(1/N) sum_n ||a_n - a_hat_n||^2`.
pub fn mse(originals: ArrayView2<'_, f64>, reconstructions: ArrayView2<'_, f64>) -> Result<f64> {
    check_same(originals, reconstructions)?;
    if originals.nrows() == 0 {
        return Err(Error::invalid("mse of an empty set"));
    }
    let sse: f64 = originals.iter().zip(reconstructions.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / originals.nrows() as f64)
}

fn check_same(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    check_dim(a.nrows(), b.nrows())?;
    check_dim(a.ncols(), b.ncols())
}

/// Per-dimension explained variance averaged over dimensions; `mean` must be
/// the per-dimension mean of the same evaluation set.
pub fn explained_variance(
    originals: ArrayView2<'_, f64>,
    reconstructions: ArrayView2<'_, f64>,
    mean: ArrayView1<'_, f64>,
) -> Result<f64> {
    check_same(originals, reconstructions)?;
    check_dim(originals.ncols(), mean.len())?;
    if originals.nrows() == 0 {
        return Err(Error::invalid("explained variance of an empty set"));
    }
    let d = originals.ncols();
    let mut sse = vec![0.0; d];
    let mut sst = vec![0.0; d];
    for (a, r) in originals.rows().into_iter().zip(reconstructions.rows()) {
        for q in 0..d {
            sse[q] += (a[q] - r[q]).powi(2);
            sst[q] += (a[q] - mean[q]).powi(2);
        }
    }
    ev_from_sums(&sse, &sst)
}

fn ev_from_sums(sse: &[f64], sst: &[f64]) -> Result<f64> {
    let zero: Vec<usize> = sst.iter().enumerate().filter(|(_, v)| **v == 0.0).map(|(q, _)| q).collect();
    if !zero.is_empty() {
        return Err(Error::ZeroVariance(zero));
    }
    let d = sse.len() as f64;
    Ok(sse.iter().zip(sst).map(|(e, t)| 1.0 - e / t).sum::<f64>() / d)
}

/// `(1/N) sum_n ||c_n||_0 / m`.
pub fn relative_sparsity(coeffs: &CoefficientMatrix) -> Result<f64> {
    if coeffs.rows() == 0 || coeffs.cols() == 0 {
        return Err(Error::invalid("relative sparsity of an empty coefficient matrix"));
    }
    Ok(coeffs.nnz() as f64 / coeffs.rows() as f64 / coeffs.cols() as f64)
}

fn check_unit_columns(features: ArrayView2<'_, f64>) -> Result<()> {
    for (i, col) in features.columns().into_iter().enumerate() {
        let n = col.dot(&col).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!("feature {i} has norm {n}, expected unit norm")));
        }
    }
    Ok(())
}

/// For every feature, its largest |cosine| to any other feature, computed
/// in column blocks so at most `BLOCK * m` inner products are live.
pub fn max_abs_cosine(features: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_unit_columns(features)?;
    let m = features.ncols();
    let mut out = Array1::from_elem(m, f64::NEG_INFINITY);
    let mut start = 0;
    while start < m {
        let end = (start + BLOCK).min(m);
        let gram = features.slice(s![.., start..end]).t().dot(&features);
        for (bi, row) in gram.rows().into_iter().enumerate() {
            let i = start + bi;
            out[i] = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                // rounding can push |cos| of parallel columns past 1
                .map(|(_, v)| v.abs().min(1.0))
                .fold(f64::NEG_INFINITY, f64::max);
        }
        start = end;
    }
    Ok(out)
}

/// Number of features whose largest |cosine| to any other feature is at
/// most `tau`.
pub fn diversity(features: ArrayView2<'_, f64>, tau: f64) -> Result<usize> {
    Ok(diversity_sweep(features, &[tau])?[0])
}

/// Diversity for several thresholds from one pass over the Gram blocks.
pub fn diversity_sweep(features: ArrayView2<'_, f64>, taus: &[f64]) -> Result<Vec<usize>> {
    for &t in taus {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1], got {t}")));
        }
    }
    let best = max_abs_cosine(features)?;
    Ok(taus.iter().map(|&t| best.iter().filter(|v| **v <= t).count()).collect())
}

/// Number of nonzero entries of `C^T C`, accumulated sparsely over samples.
pub fn gram_support(coeffs: &CoefficientMatrix) -> usize {
    let m = coeffs.cols();
    let mut row_buf: Vec<(usize, f64)> = Vec::new();
    if m <= 2048 {
        let mut acc = vec![0.0f64; m * m];
        for n in 0..coeffs.rows() {
            row_buf.clear();
            row_buf.extend(coeffs.row(n));
            for &(i, ci) in &row_buf {
                for &(j, cj) in &row_buf {
                    acc[i * m + j] += ci * cj;
                }
            }
        }
        acc.iter().filter(|v| **v != 0.0).count()
    } else {
        let mut acc: HashMap<(u32, u32), f64> = HashMap::new();
        for n in 0..coeffs.rows() {
            row_buf.clear();
            row_buf.extend(coeffs.row(n));
            for &(i, ci) in &row_buf {
                for &(j, cj) in &row_buf {
                    *acc.entry((i as u32, j as u32)).or_insert(0.0) += ci * cj;
                }
            }
        }
        acc.values().filter(|v| **v != 0.0).count()
    }
}

/// `1 - ||C^T C||_0 / m^2`.
pub fn connectivity(coeffs: &CoefficientMatrix) -> Result<f64> {
    let m = coeffs.cols();
    if m == 0 {
        return Err(Error::invalid("connectivity needs m >= 1"));
    }
    Ok(1.0 - gram_support(coeffs) as f64 / (m as f64 * m as f64))
}

/// Mean over the features of run `s` of the largest signed cosine to any
/// feature of any other run.
pub fn stability(runs: &[ArrayView2<'_, f64>], s: usize) -> Result<f64> {
    if runs.len() < 2 {
        return Err(Error::invalid("stability needs at least two runs"));
    }
    if s >= runs.len() {
        return Err(Error::invalid(format!("run index {s} out of range")));
    }
    let d = runs[0].nrows();
    for r in runs {
        check_dim(d, r.nrows())?;
        check_unit_columns(*r)?;
    }
    let base = runs[s];
    if base.ncols() == 0 {
        return Err(Error::invalid("run has no features"));
    }
    let mut best = Array1::from_elem(base.ncols(), f64::NEG_INFINITY);
    for (t, other) in runs.iter().enumerate() {
        if t == s {
            continue;
        }
        let gram = base.t().dot(other);
        for (i, row) in gram.rows().into_iter().enumerate() {
            best[i] = row.iter().copied().fold(best[i], f64::max);
        }
    }
    Ok(best.mean().expect("non-empty"))
}

/// Stability of every run.
pub fn stability_all(runs: &[ArrayView2<'_, f64>]) -> Result<Vec<f64>> {
    (0..runs.len()).map(|s| stability(runs, s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityAt {
    pub tau: f64,
    pub count: usize,
}

/// Results of [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target_id: String,
    pub kind: String,
    #[serde(rename = "J")]
    pub j: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub mse: f64,
    pub explained_variance: f64,
    pub relative_sparsity: f64,
    pub diversity: Vec<DiversityAt>,
    pub connectivity: f64,
    /// `||C^T C||_0 / m^2`, the complement of connectivity.
    pub coactivation_density: f64,
    pub stability: Option<f64>,
    pub eval_split: String,
    pub config_hash: Option<String>,
    pub crate_version: String,
}

impl MetricsReport {
    pub fn csv_header(&self) -> String {
        let mut h = String::from("target_id,kind,J,m,N,mse,ev,rel_sparsity");
        for d in &self.diversity {
            let _ = write!(h, ",diversity@{}", d.tau);
        }
        h.push_str(",connectivity,stability,config_hash,version");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{},{}",
            self.target_id,
            self.kind,
            self.j,
            self.m,
            self.n,
            self.mse,
            self.explained_variance,
            self.relative_sparsity
        );
        for d in &self.diversity {
            let _ = write!(r, ",{}", d.count);
        }
        let stab = self.stability.map(|v| v.to_string()).unwrap_or_default();
        let _ = write!(
            r,
            ",{},{},{},{}",
            self.connectivity,
            stab,
            self.config_hash.as_deref().unwrap_or(""),
            self.crate_version
        );
        r
    }

    /// Header plus one data row, newline-terminated.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }
}

/// Options for [`evaluate`].
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub target_id: String,
    pub taus: Vec<f64>,
    pub eval_split: String,
    pub stability: Option<f64>,
    pub config_hash: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            target_id: "target".into(),
            taus: vec![DEFAULT_TAU],
            eval_split: "eval".into(),
            stability: None,
            config_hash: None,
        }
    }
}

/// Computes every metric for `target` on `data` in one streaming pass
/// (after the per-dimension mean). Ensembles are reconstructed through
/// their flattened form.
pub fn evaluate(target: &Target, data: &ActivationDataset, opts: &EvalOptions) -> Result<MetricsReport> {
    check_dim(target.d(), data.dim())?;
    let mean = data.per_dim_mean()?;
    let d = data.dim();
    let m = target.feature_count();
    let (w_dec, b_dec) = match target {
        Target::Single(p) => (p.w_dec.clone(), p.b_dec.clone()),
        Target::Ensemble(e) => {
            let f = e.flatten();
            (f.w_dec_cat, f.b_dec_sum)
        }
    };
    let mut coeffs = CoefficientMatrix::new(m);
    let mut sse_dim = vec![0.0; d];
    let mut sst_dim = vec![0.0; d];
    let mut sse_total = 0.0;
    for batch in data.stream_batches(EVAL_CHUNK, None)? {
        let codes = target.encode_batch(batch.view())?;
        let recon = codes.dot(&w_dec.t()) + &b_dec;
        coeffs.push_rows(codes.view());
        for (a, r) in batch.rows().into_iter().zip(recon.rows()) {
            for q in 0..d {
                let e = (a[q] - r[q]).powi(2);
                sse_dim[q] += e;
                sse_total += e;
                sst_dim[q] += (a[q] - mean[q]).powi(2);
            }
        }
    }
    let features = target.features();
    let counts = diversity_sweep(features.view(), &opts.taus)?;
    let support = gram_support(&coeffs);
    let density = support as f64 / (m as f64 * m as f64);
    Ok(MetricsReport {
        target_id: opts.target_id.clone(),
        kind: target.kind_name().into(),
        j: target.members(),
        m,
        n: data.len(),
        mse: sse_total / data.len() as f64,
        explained_variance: ev_from_sums(&sse_dim, &sst_dim)?,
        relative_sparsity: relative_sparsity(&coeffs)?,
        diversity: opts.taus.iter().zip(counts).map(|(&tau, count)| DiversityAt { tau, count }).collect(),
        connectivity: 1.0 - density,
        coactivation_density: density,
        stability: opts.stability,
        eval_split: opts.eval_split.clone(),
        config_hash: opts.config_hash.clone(),
        crate_version: crate::VERSION.into(),
    })
}

/// Dense coefficient matrix of `target` on `data` (for small evaluations).
pub fn coefficients(target: &Target, data: &ActivationDataset) -> Result<CoefficientMatrix> {
    let mut coeffs = CoefficientMatrix::new(target.feature_count());
    for batch in data.stream_batches(EVAL_CHUNK, None)? {
        coeffs.push_rows(target.encode_batch(batch.view())?.view());
    }
    Ok(coeffs)
}
