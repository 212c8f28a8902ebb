use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::model::{Activation, SaeParams};
use crate::data::{epoch_order, ActivationDataset};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Optimizer, schedule and sparsity settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Capped at the dataset size.
    pub batch_size: usize,
    pub epochs: usize,
    /// Data-order seed; shared by all members of a bagging ensemble.
    pub seed: u64,
    pub lambda: f64,
    /// Fraction of total steps over which lambda ramps linearly from 0.
    pub warmup_fraction: f64,
    /// Log every this many optimizer steps (the last step is always logged).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 10_000,
            epochs: 1,
            seed: 0,
            lambda: 0.75,
            warmup_fraction: 0.05,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0) || !(self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.log_every == 0 {
            return bad("batch_size, epochs and log_every must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Shuffle seed for `epoch`.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        derive_seed(self.seed, epoch as u64)
    }
}

/// One logged interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub lambda: f64,
    pub recon_loss: f64,
    pub sparsity_term: f64,
    pub ev_estimate: f64,
    /// Features that never fired since the previous log row.
    pub dead_features: usize,
    /// Mean squared norm of the training targets in the batch (residual
    /// energy for boosting members).
    pub input_energy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&TrainLogRow> {
        self.rows.last()
    }
}

/// Explained variance of `recon` against `x` using the batch's own means;
/// constant dimensions are skipped.
pub fn batch_explained_variance(x: ArrayView2<'_, f64>, recon: ArrayView2<'_, f64>) -> f64 {
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let mut total = 0.0;
    let mut dims = 0usize;
    for q in 0..x.ncols() {
        let (mut sse, mut sst) = (0.0, 0.0);
        for n in 0..x.nrows() {
            sse += (x[[n, q]] - recon[[n, q]]).powi(2);
            sst += (x[[n, q]] - mean[q]).powi(2);
        }
        if sst > 0.0 {
            total += 1.0 - sse / sst;
            dims += 1;
        }
    }
    if dims == 0 {
        f64::NAN
    } else {
        total / dims as f64
    }
}

/// Trains one SAE on `data`. The decoder bias starts at the dataset mean.
pub fn train_sae(
    data: &ActivationDataset,
    config: &TrainConfig,
    activation: Activation,
    k: usize,
    init_seed: u64,
) -> Result<(SaeParams, TrainLog)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mean = data.per_dim_mean()?;
    train_with_transform(data, config, activation, k, init_seed, Some(mean), &|b| Ok(b))
}

/// Training loop shared by single SAEs and boosting members. Every batch
/// drawn from `data` is passed through `transform` before the step.
pub(crate) fn train_with_transform(
    data: &ActivationDataset,
    config: &TrainConfig,
    activation: Activation,
    k: usize,
    init_seed: u64,
    b_dec_init: Option<Array1<f64>>,
    transform: &dyn Fn(Array2<f64>) -> Result<Array2<f64>>,
) -> Result<(SaeParams, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut params =
        SaeParams::init(data.dim(), k, activation, config.lambda, b_dec_init.as_ref().map(|b| b.view()), init_seed)?;
    let adam = config.adam();
    let mut state = AdamState::new(&params);

    let n = data.len();
    let batch = config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_steps = (config.warmup_fraction * total_steps as f64).ceil() as usize;

    let mut log = TrainLog::default();
    let mut fired = vec![false; k];
    let mut step = 0usize;
    let view = data.view();
    for epoch in 0..config.epochs {
        let order = epoch_order(n, Some(config.epoch_seed(epoch)));
        for chunk in order.chunks(batch) {
            let x = transform(view.select(Axis(0), chunk))?;
            let lambda = if warmup_steps == 0 {
                params.lambda
            } else {
                params.lambda * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
            };
            let (parts, grads, fwd) = params.backward(x.view(), lambda)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence { step, loss: parts.total });
            }
            for row in fwd.codes.rows() {
                for (f, c) in fired.iter_mut().zip(row.iter()) {
                    *f |= *c != 0.0;
                }
            }
            if step.is_multiple_of(config.log_every) || step + 1 == total_steps {
                log.rows.push(TrainLogRow {
                    step,
                    epoch,
                    lambda,
                    recon_loss: parts.recon,
                    sparsity_term: parts.sparsity,
                    ev_estimate: batch_explained_variance(x.view(), fwd.recon.view()),
                    dead_features: fired.iter().filter(|f| !**f).count(),
                    input_energy: x.mapv(|v| v * v).sum() / x.nrows() as f64,
                });
                fired.iter_mut().for_each(|f| *f = false);
            }

            adam_step(&mut params, &grads, &mut state, &adam);
            if params.w_dec.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step, loss: f64::NAN });
            }
            step += 1;
        }
    }
    Ok((params, log))
}
