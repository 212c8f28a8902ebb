//! Concept detection and spurious-correlation removal on labeled sequence
//! corpora, using mean-pooled SAE (or ensemble) codes as features.

mod corpus;
mod logistic;

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use corpus::{
    generate_corpus, CorpusSidecar, CorpusSpec, LabeledSequenceSet, PlantedAttribute, PlantedConcept,
    DEFAULT_GROUP_SIZE,
};
pub use logistic::{train_logistic, LogisticConfig, ProbeModel};

use crate::ensemble::Target;
use crate::error::{check_dim, Error, Result};
use crate::rng::derive_seed;

/// Default number of features ablated for spurious-correlation removal.
pub const DEFAULT_SCR_FEATURES: usize = 20;
/// Default share of sequences used for training in held-out evaluations.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Mean over tokens of the target's codes.
pub fn pool_sequence(target: &Target, sequence: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if sequence.nrows() == 0 {
        return Err(Error::invalid("cannot pool an empty sequence"));
    }
    let codes = target.encode_batch(sequence)?;
    Ok(codes.mean_axis(Axis(0)).expect("non-empty"))
}

/// Pooled codes for every sequence, `N x m`.
pub fn pool_corpus(target: &Target, corpus: &LabeledSequenceSet) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((corpus.len(), target.feature_count()));
    for (i, seq) in corpus.sequences.iter().enumerate() {
        out.row_mut(i).assign(&pool_sequence(target, seq.view())?);
    }
    Ok(out)
}

/// Indices of the `top` largest `scores`, ties to the lower index.
fn top_indices(scores: &[f64], top: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(top);
    idx
}

/// Per-feature `|mean(x | y=1) - mean(x | y=0)|`.
pub fn mean_differences(pooled: ArrayView2<'_, f64>, labels: &[i32]) -> Result<Vec<f64>> {
    check_dim(pooled.nrows(), labels.len())?;
    let (zeros, ones) = logistic::check_binary(labels)?;
    if zeros == 0 || ones == 0 {
        return Err(Error::invalid("mean-difference selection needs both classes"));
    }
    let m = pooled.ncols();
    let mut s1 = vec![0.0; m];
    let mut s0 = vec![0.0; m];
    for (row, &y) in pooled.rows().into_iter().zip(labels) {
        let acc = if y == 1 { &mut s1 } else { &mut s0 };
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    Ok((0..m).map(|i| (s1[i] / ones as f64 - s0[i] / zeros as f64).abs()).collect())
}

/// The `top` features with the largest absolute class-mean difference.
pub fn select_by_mean_diff(pooled: ArrayView2<'_, f64>, labels: &[i32], top: usize) -> Result<Vec<usize>> {
    if top == 0 || top > pooled.ncols() {
        return Err(Error::invalid(format!("L must lie in 1..={}, got {top}", pooled.ncols())));
    }
    Ok(top_indices(&mean_differences(pooled, labels)?, top))
}

/// Copy of `code` with `indices` set to zero.
pub fn zero_ablate(code: ArrayView1<'_, f64>, indices: &[usize]) -> Result<Array1<f64>> {
    let mut out = code.to_owned();
    for &i in indices {
        if i >= out.len() {
            return Err(Error::invalid(format!("ablation index {i} out of range for {} features", out.len())));
        }
        out[i] = 0.0;
    }
    Ok(out)
}

/// Zero-ablates `indices` in every row.
pub fn zero_ablate_rows(codes: ArrayView2<'_, f64>, indices: &[usize]) -> Result<Array2<f64>> {
    let mut out = codes.to_owned();
    for &i in indices {
        if i >= out.ncols() {
            return Err(Error::invalid(format!("ablation index {i} out of range for {} features", out.ncols())));
        }
        out.column_mut(i).fill(0.0);
    }
    Ok(out)
}

/// `(a_abl - a_base) / (a_oracle - a_base)`.
pub fn shift_score(a_abl: f64, a_base: f64, a_oracle: f64) -> Result<f64> {
    if a_oracle == a_base {
        return Err(Error::Undefined("oracle accuracy equals base accuracy".into()));
    }
    Ok((a_abl - a_base) / (a_oracle - a_base))
}

/// Stratified split of sequence indices into (train, test).
pub fn stratified_split(labels: &[i32], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction must lie in (0, 1)"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [0, 1] {
        let members: Vec<usize> = labels.iter().enumerate().filter(|(_, &y)| y == class).map(|(i, _)| i).collect();
        let order = crate::data::epoch_order(members.len(), Some(derive_seed(seed, class as u64)));
        let cut = (members.len() as f64 * train_fraction).round() as usize;
        for (pos, &o) in order.iter().enumerate() {
            if pos < cut {
                train.push(members[o])
            } else {
                test.push(members[o])
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn gather(labels: &[i32], idx: &[usize]) -> Vec<i32> {
    idx.iter().map(|&i| labels[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub selected: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub probe_converged: bool,
}

/// Pools codes, selects the `top` mean-difference features on the training
/// split, fits a logistic probe on them and reports held-out accuracy.
pub fn concept_detection_eval(
    target: &Target,
    corpus: &LabeledSequenceSet,
    label: &str,
    top: usize,
    split_seed: u64,
    cfg: &LogisticConfig,
) -> Result<ConceptResult> {
    let pooled = pool_corpus(target, corpus)?;
    concept_detection_pooled(pooled.view(), corpus.label(label)?, top, split_seed, DEFAULT_TRAIN_FRACTION, cfg)
}

/// [`concept_detection_eval`] on precomputed pooled codes.
pub fn concept_detection_pooled(
    pooled: ArrayView2<'_, f64>,
    labels: &[i32],
    top: usize,
    split_seed: u64,
    train_fraction: f64,
    cfg: &LogisticConfig,
) -> Result<ConceptResult> {
    check_dim(pooled.nrows(), labels.len())?;
    let (train, test) = stratified_split(labels, train_fraction, split_seed)?;
    if test.is_empty() {
        return Err(Error::invalid("held-out split is empty"));
    }
    let x_train = pooled.select(Axis(0), &train);
    let y_train = gather(labels, &train);
    let selected = select_by_mean_diff(x_train.view(), &y_train, top)?;
    let probe = train_logistic(x_train.select(Axis(1), &selected).view(), &y_train, selected.clone(), cfg)?;
    let x_test = pooled.select(Axis(0), &test);
    let accuracy = probe.accuracy(x_test.view(), &gather(labels, &test))?;
    Ok(ConceptResult {
        accuracy,
        train_accuracy: probe.train_accuracy,
        selected,
        n_train: train.len(),
        n_test: test.len(),
        probe_converged: probe.converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionRule {
    /// `|w_i| * std(c_i)`
    #[default]
    WeightTimesStd,
    /// `|w_i|`
    Weight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSelection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub probe_accuracy: f64,
    /// Probe barely beats the majority class; the ranking carries little signal.
    pub low_confidence: bool,
}

/// Fits a probe for `labels` over all features of `pooled` and returns the
/// `top` features by attribution score.
pub fn probe_attribution_select(
    pooled: ArrayView2<'_, f64>,
    labels: &[i32],
    top: usize,
    rule: AttributionRule,
    cfg: &LogisticConfig,
) -> Result<AttributionSelection> {
    let m = pooled.ncols();
    if top > m {
        return Err(Error::invalid(format!("L = {top} exceeds feature count {m}")));
    }
    let probe = train_logistic(pooled, labels, (0..m).collect(), cfg)?;
    if probe.weights.iter().all(|w| *w == 0.0) {
        return Err(Error::DegenerateProbe("all probe weights are zero".into()));
    }
    let std = pooled.std_axis(Axis(0), 0.0);
    let scores: Vec<f64> = probe
        .weights
        .iter()
        .zip(std.iter())
        .map(|(w, s)| match rule {
            AttributionRule::WeightTimesStd => w.abs() * s,
            AttributionRule::Weight => w.abs(),
        })
        .collect();
    let ones = labels.iter().filter(|y| **y == 1).count() as f64 / labels.len() as f64;
    let majority = ones.max(1.0 - ones);
    Ok(AttributionSelection {
        indices: top_indices(&scores, top),
        scores,
        probe_accuracy: probe.train_accuracy,
        low_confidence: probe.train_accuracy < majority + 0.1,
    })
}

/// Which attribute the ablated features are attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSource {
    /// Features attributed to the spurious label.
    #[default]
    Spurious,
    /// Features attributed to the task label (adversarial control).
    Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrOptions {
    pub task_label: String,
    pub spurious_label: String,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub rule: AttributionRule,
    pub source: AblationSource,
    pub logistic: LogisticConfig,
}

impl Default for ScrOptions {
    fn default() -> Self {
        Self {
            task_label: "task".into(),
            spurious_label: "spurious".into(),
            split_seed: 0,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            rule: AttributionRule::default(),
            source: AblationSource::default(),
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrPoint {
    #[serde(rename = "L")]
    pub l: usize,
    pub a_abl: f64,
    pub s_shift: f64,
    pub ablated: Vec<usize>,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrResult {
    pub a_base: f64,
    pub a_oracle: f64,
    pub points: Vec<ScrPoint>,
}

/// Spurious-correlation removal sweep over `l_values`.
///
/// The base classifier is fit on the biased corpus and the oracle on the
/// training part of the balanced corpus; both are scored on the balanced
/// held-out part. For each `L` the attribution probe is fit on the balanced
/// training part, the selected features are zero-ablated, the task
/// classifier is refit on ablated biased codes and scored on ablated
/// balanced held-out codes.
pub fn scr_eval(
    target: &Target,
    biased: &LabeledSequenceSet,
    balanced: &LabeledSequenceSet,
    l_values: &[usize],
    opts: &ScrOptions,
) -> Result<ScrResult> {
    let pb = pool_corpus(target, biased)?;
    let pbal = pool_corpus(target, balanced)?;
    scr_pooled(pb.view(), biased, pbal.view(), balanced, l_values, opts)
}

/// [`scr_eval`] on precomputed pooled codes.
pub fn scr_pooled(
    biased_codes: ArrayView2<'_, f64>,
    biased: &LabeledSequenceSet,
    balanced_codes: ArrayView2<'_, f64>,
    balanced: &LabeledSequenceSet,
    l_values: &[usize],
    opts: &ScrOptions,
) -> Result<ScrResult> {
    let m = biased_codes.ncols();
    check_dim(m, balanced_codes.ncols())?;
    let task_b = biased.label(&opts.task_label)?;
    let task_bal = balanced.label(&opts.task_label)?;
    let attr_label = match opts.source {
        AblationSource::Spurious => balanced.label(&opts.spurious_label)?,
        AblationSource::Task => task_bal,
    };
    let all: Vec<usize> = (0..m).collect();
    let (train, test) = stratified_split(task_bal, opts.train_fraction, opts.split_seed)?;
    let bal_train = balanced_codes.select(Axis(0), &train);
    let bal_test = balanced_codes.select(Axis(0), &test);
    let y_test = gather(task_bal, &test);

    let base = train_logistic(biased_codes, task_b, all.clone(), &opts.logistic)?;
    let a_base = base.accuracy(bal_test.view(), &y_test)?;
    let oracle = train_logistic(bal_train.view(), &gather(task_bal, &train), all.clone(), &opts.logistic)?;
    let a_oracle = oracle.accuracy(bal_test.view(), &y_test)?;
    if a_oracle == a_base {
        return Err(Error::Undefined(format!("oracle accuracy equals base accuracy ({a_base})")));
    }

    let mut points = Vec::with_capacity(l_values.len());
    for &l in l_values {
        if l == 0 {
            points.push(ScrPoint {
                l,
                a_abl: a_base,
                s_shift: shift_score(a_base, a_base, a_oracle)?,
                ablated: vec![],
                low_confidence: false,
            });
            continue;
        }
        let sel =
            probe_attribution_select(bal_train.view(), &gather(attr_label, &train), l, opts.rule, &opts.logistic)?;
        let ablated_b = zero_ablate_rows(biased_codes, &sel.indices)?;
        let modified = train_logistic(ablated_b.view(), task_b, all.clone(), &opts.logistic)?;
        let ablated_test = zero_ablate_rows(bal_test.view(), &sel.indices)?;
        let a_abl = modified.accuracy(ablated_test.view(), &y_test)?;
        points.push(ScrPoint {
            l,
            a_abl,
            s_shift: shift_score(a_abl, a_base, a_oracle)?,
            ablated: sel.indices,
            low_confidence: sel.low_confidence,
        });
    }
    Ok(ScrResult { a_base, a_oracle, points })
}

/// One downstream result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamRow {
    pub target_id: String,
    pub kind: String,
    #[serde(rename = "J")]
    pub j: usize,
    pub task: String,
    #[serde(rename = "L")]
    pub l: usize,
    /// `accuracy` for concept detection, `s_shift` for SCR.
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// CSV with header `target_id,kind,J,task,L,<metric>,seed,config_hash,version`.
/// All rows must share one metric name.
pub fn downstream_csv(rows: &[DownstreamRow], config_hash: Option<&str>) -> Result<String> {
    let metric = rows.first().map_or("value", |r| r.metric.as_str());
    if rows.iter().any(|r| r.metric != metric) {
        return Err(Error::invalid("mixed metrics in one downstream CSV"));
    }
    let mut out = format!("target_id,kind,J,task,L,{metric},seed,config_hash,version\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.target_id,
            r.kind,
            r.j,
            r.task,
            r.l,
            r.value,
            r.seed,
            config_hash.unwrap_or(""),
            crate::VERSION
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shift_score_cases() {
        assert_eq!(shift_score(0.8, 0.6, 0.8).unwrap(), 1.0);
        assert_eq!(shift_score(0.6, 0.6, 0.8).unwrap(), 0.0);
        assert!((shift_score(0.70, 0.60, 0.80).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(shift_score(0.7, 0.6, 0.6), Err(Error::Undefined(_))));
    }

    #[test]
    fn ablation_cases() {
        let c = array![5.0, 6.0, 7.0, 8.0];
        assert_eq!(zero_ablate(c.view(), &[]).unwrap(), c);
        assert_eq!(zero_ablate(c.view(), &[0, 1, 2, 3]).unwrap(), Array1::<f64>::zeros(4));
        assert_eq!(zero_ablate(c.view(), &[1, 3]).unwrap(), array![5.0, 0.0, 7.0, 0.0]);
        assert!(zero_ablate(c.view(), &[4]).is_err());
    }

    #[test]
    fn mean_diff_selection() {
        // feature 3 separates the classes
        let mut x = Array2::from_elem((6, 5), 0.25);
        let y = [1, 0, 1, 0, 1, 0];
        for (i, &yi) in y.iter().enumerate() {
            x[[i, 3]] = yi as f64;
        }
        assert_eq!(select_by_mean_diff(x.view(), &y, 1).unwrap(), vec![3]);
        // exact tie between 1 and 4
        let mut t = Array2::zeros((4, 5));
        for i in 0..4 {
            let v = if i % 2 == 0 { 0.9 } else { 0.0 };
            t[[i, 1]] = v;
            t[[i, 4]] = v;
        }
        assert_eq!(select_by_mean_diff(t.view(), &[1, 0, 1, 0], 2).unwrap(), vec![1, 4]);
        assert!(select_by_mean_diff(t.view(), &[1, 1, 1, 1], 1).is_err());
        assert!(select_by_mean_diff(t.view(), &[1, 0, 1, 0], 6).is_err());
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<i32> = (0..100).map(|i| i32::from(i % 4 == 0)).collect();
        let (tr, te) = stratified_split(&labels, 0.8, 1).unwrap();
        assert_eq!(tr.len() + te.len(), 100);
        assert_eq!(te.iter().filter(|&&i| labels[i] == 1).count(), 5);
        assert!(tr.iter().all(|i| !te.contains(i)));
    }

    #[test]
    fn csv_rows() {
        let rows = vec![DownstreamRow {
            target_id: "t".into(),
            kind: "single".into(),
            j: 1,
            task: "scr".into(),
            l: 5,
            metric: "s_shift".into(),
            value: 0.25,
            seed: 3,
        }];
        let csv = downstream_csv(&rows, Some("h")).unwrap();
        assert!(csv.starts_with("target_id,kind,J,task,L,s_shift,seed"));
        assert!(csv.contains("t,single,1,scr,5,0.25,3,h,"));
    }
}
