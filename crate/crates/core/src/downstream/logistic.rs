//! L2-regularized logistic regression fit by full-batch gradient descent
//! with Armijo backtracking.
//!
//! Features are standardized internally (constant columns are left
//! centred); the fitted weights are mapped back to the raw feature scale.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    /// Coefficient of `0.5 ||w||^2` on standardized weights (bias unpenalized).
    pub l2: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Return [`Error::NonConvergence`] instead of a flagged model.
    pub require_convergence: bool,
    /// Keep the objective value after every iteration.
    pub record_trace: bool,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { l2: 1e-3, grad_tol: 1e-6, max_iter: 10_000, require_convergence: false, record_trace: false }
    }
}

/// A fitted linear probe over a subset of feature indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// Raw-scale weights, one per selected feature.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub selected_features: Vec<usize>,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn check_binary(labels: &[i32]) -> Result<(usize, usize)> {
    let mut ones = 0;
    for &y in labels {
        match y {
            0 => {}
            1 => ones += 1,
            other => return Err(Error::invalid(format!("labels must be 0 or 1, got {other}"))),
        }
    }
    Ok((labels.len() - ones, ones))
}

struct Problem<'a> {
    z: ndarray::Array2<f64>,
    y: &'a [i32],
    l2: f64,
}

impl Problem<'_> {
    fn objective(&self, w: &Array1<f64>, b: f64) -> f64 {
        let n = self.y.len() as f64;
        let margins = self.z.dot(w) + b;
        let data: f64 =
            margins.iter().zip(self.y).map(|(&m, &y)| if y == 1 { softplus(-m) } else { softplus(m) }).sum();
        data / n + 0.5 * self.l2 * w.dot(w)
    }

    fn gradient(&self, w: &Array1<f64>, b: f64) -> (Array1<f64>, f64) {
        let n = self.y.len() as f64;
        let margins = self.z.dot(w) + b;
        let resid = Array1::from_iter(margins.iter().zip(self.y).map(|(&m, &y)| sigmoid(m) - y as f64));
        let gw = self.z.t().dot(&resid) / n + w * self.l2;
        (gw, resid.sum() / n)
    }
}

/// Fits a probe on `features` (`N x L`, columns corresponding to
/// `selected`) against binary `labels`.
pub fn train_logistic(
    features: ArrayView2<'_, f64>,
    labels: &[i32],
    selected: Vec<usize>,
    cfg: &LogisticConfig,
) -> Result<ProbeModel> {
    check_dim(features.nrows(), labels.len())?;
    check_dim(features.ncols(), selected.len())?;
    if labels.len() < 2 {
        return Err(Error::invalid("logistic regression needs at least two samples"));
    }
    let (zeros, ones) = check_binary(labels)?;
    if zeros == 0 || ones == 0 {
        return Err(Error::invalid("logistic regression needs both classes"));
    }

    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let sd = features.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    let z = (&features - &mean) / &sd;
    let prob = Problem { z, y: labels, l2: cfg.l2 };

    let l = features.ncols();
    let mut w = Array1::<f64>::zeros(l);
    // start at the log-odds of the base rate
    let mut b = (ones as f64 / zeros as f64).ln();
    let mut f = prob.objective(&w, b);
    let mut step: f64 = 1.0;
    let mut trace = Vec::new();
    if cfg.record_trace {
        trace.push(f);
    }
    let mut iterations = 0;
    let (mut gw, mut gb) = prob.gradient(&w, b);
    let mut gnorm = (gw.dot(&gw) + gb * gb).sqrt();
    while gnorm >= cfg.grad_tol && iterations < cfg.max_iter {
        let g2 = gnorm * gnorm;
        step = (step * 2.0).min(1e4);
        let mut accepted = false;
        while step > 1e-16 {
            let w_new = &w - &(&gw * step);
            let b_new = b - step * gb;
            let f_new = prob.objective(&w_new, b_new);
            if f_new <= f - 0.5 * step * g2 {
                w = w_new;
                b = b_new;
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if cfg.record_trace {
            trace.push(f);
        }
        if !accepted {
            break;
        }
        (gw, gb) = prob.gradient(&w, b);
        gnorm = (gw.dot(&gw) + gb * gb).sqrt();
    }
    let converged = gnorm < cfg.grad_tol;
    if !converged && cfg.require_convergence {
        return Err(Error::NonConvergence { grad_norm: gnorm });
    }

    let weights = &w / &sd;
    let bias = b - weights.dot(&mean);
    let mut model = ProbeModel {
        weights: weights.to_vec(),
        bias,
        selected_features: selected,
        converged,
        grad_norm: gnorm,
        iterations,
        train_accuracy: 0.0,
        loss_trace: trace,
    };
    let correct = features.rows().into_iter().zip(labels).filter(|(row, &y)| model.predict_selected(*row) == y).count();
    model.train_accuracy = correct as f64 / labels.len() as f64;
    Ok(model)
}

impl ProbeModel {
    /// Decision value for a row that already holds only the selected features.
    pub fn margin_selected(&self, row: ArrayView1<'_, f64>) -> f64 {
        row.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>() + self.bias
    }

    pub fn predict_selected(&self, row: ArrayView1<'_, f64>) -> i32 {
        i32::from(self.margin_selected(row) > 0.0)
    }

    /// Decision value for a full feature vector.
    pub fn margin(&self, full: ArrayView1<'_, f64>) -> f64 {
        self.selected_features.iter().zip(&self.weights).map(|(&i, w)| full[i] * w).sum::<f64>() + self.bias
    }

    pub fn predict(&self, full: ArrayView1<'_, f64>) -> i32 {
        i32::from(self.margin(full) > 0.0)
    }

    /// Accuracy on full feature vectors.
    pub fn accuracy(&self, full: ArrayView2<'_, f64>, labels: &[i32]) -> Result<f64> {
        check_dim(full.nrows(), labels.len())?;
        if labels.is_empty() {
            return Err(Error::invalid("accuracy of an empty set"));
        }
        if let Some(&max) = self.selected_features.iter().max() {
            if max >= full.ncols() {
                return Err(Error::invalid(format!("feature index {max} out of range")));
            }
        }
        let correct = full.rows().into_iter().zip(labels).filter(|(r, &y)| self.predict(*r) == y).count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn separable_one_dimensional_data() {
        let x = Array2::from_shape_vec((6, 1), vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let m = train_logistic(x.view(), &y, vec![0], &LogisticConfig::default()).unwrap();
        assert_eq!(m.train_accuracy, 1.0);
        assert!(m.weights[0] > 0.0);
    }

    #[test]
    fn constant_features_predict_majority() {
        let x = Array2::from_elem((10, 2), 0.7);
        let y = [1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let m = train_logistic(x.view(), &y, vec![0, 1], &LogisticConfig::default()).unwrap();
        assert_eq!(m.train_accuracy, 0.7);
        assert!(m.weights.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn matches_newton_oracle_on_raw_scale() {
        // overlapping classes; oracle: 2x2 Newton on the raw-scale objective
        // with penalty 0.5 * l2 * (w * sd)^2
        let xs = [-2.0, -1.5, -0.4, 0.3, 0.1, 0.9, 1.6, 2.2, -0.2, 0.6];
        let y = [0, 0, 0, 0, 1, 1, 1, 1, 0, 1];
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let l2 = 1e-3;
        let (mut w, mut b) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (l2 * var * w, 0.0, l2 * var, 0.0, 0.0);
            for (x, &t) in xs.iter().zip(&y) {
                let p = 1.0 / (1.0 + (-(w * x + b)).exp());
                let r = (p - t as f64) / n;
                let h = p * (1.0 - p) / n;
                gw += r * x;
                gb += r;
                hww += h * x * x;
                hwb += h * x;
                hbb += h;
            }
            let det = hww * hbb - hwb * hwb;
            w -= (hbb * gw - hwb * gb) / det;
            b -= (hww * gb - hwb * gw) / det;
        }
        let x = Array2::from_shape_vec((10, 1), xs.to_vec()).unwrap();
        let cfg = LogisticConfig { grad_tol: 1e-9, ..Default::default() };
        let m = train_logistic(x.view(), &y, vec![0], &cfg).unwrap();
        assert!(m.converged, "{} {}", m.grad_norm, m.iterations);
        assert!((m.weights[0] - w).abs() < 1e-6, "{} vs {w}", m.weights[0]);
        assert!((m.bias - b).abs() < 1e-6, "{} vs {b}", m.bias);
    }

    #[test]
    fn loss_is_monotone() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 13 + j * 7) % 11) as f64 / 5.0 - 1.0);
        let y: Vec<i32> = (0..40).map(|i| i32::from((i * 13) % 11 > 4)).collect();
        let cfg = LogisticConfig { record_trace: true, ..Default::default() };
        let m = train_logistic(x.view(), &y, vec![0, 1, 2], &cfg).unwrap();
        assert!(m.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn input_errors() {
        let x = Array2::from_elem((3, 1), 1.0);
        assert!(train_logistic(x.view(), &[1, 1, 1], vec![0], &LogisticConfig::default()).is_err());
        assert!(train_logistic(x.view(), &[1, 2, 0], vec![0], &LogisticConfig::default()).is_err());
        let strict = LogisticConfig { max_iter: 1, require_convergence: true, ..Default::default() };
        let xs = Array2::from_shape_vec((4, 1), vec![-1.0, -0.5, 0.5, 1.0]).unwrap();
        assert!(matches!(
            train_logistic(xs.view(), &[0, 1, 0, 1], vec![0], &strict),
            Err(Error::NonConvergence { .. })
        ));
    }
}
