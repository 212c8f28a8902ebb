use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use super::model::{normalize_columns, project_columns_to_tangent, SaeGrads, SaeParams};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: SaeGrads,
    pub v: SaeGrads,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &SaeParams) -> Self {
        Self { m: SaeGrads::zeros_like(params), v: SaeGrads::zeros_like(params), step: 0 }
    }
}

fn update_block<D: Dimension>(
    p: &mut Array<f64, D>,
    g: &Array<f64, D>,
    m: &mut Array<f64, D>,
    v: &mut Array<f64, D>,
    cfg: &AdamConfig,
    c1: f64,
    c2: f64,
) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    });
}

/// One bias-corrected Adam update, followed by decoder column
/// renormalization, re-projection of the decoder first moment onto the new
/// tangent space, and clamping of JumpReLU thresholds at zero.
pub fn adam_step(params: &mut SaeParams, grads: &SaeGrads, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    // beta = 0 gives c = 1; guard the degenerate beta = 1 case
    let c1 = if c1 > 0.0 { c1 } else { 1.0 };
    let c2 = if c2 > 0.0 { c2 } else { 1.0 };

    let (m, v) = (&mut state.m, &mut state.v);
    update_block(&mut params.w_enc, &grads.w_enc, &mut m.w_enc, &mut v.w_enc, cfg, c1, c2);
    update_block(&mut params.b_enc, &grads.b_enc, &mut m.b_enc, &mut v.b_enc, cfg, c1, c2);
    update_block(&mut params.w_dec, &grads.w_dec, &mut m.w_dec, &mut v.w_dec, cfg, c1, c2);
    update_block(&mut params.b_dec, &grads.b_dec, &mut m.b_dec, &mut v.b_dec, cfg, c1, c2);
    if let (Some(p), Some(g), Some(mt), Some(vt)) =
        (params.theta.as_mut(), grads.theta.as_ref(), m.theta.as_mut(), v.theta.as_mut())
    {
        update_block(p, g, mt, vt, cfg, c1, c2);
        p.mapv_inplace(|x| x.max(0.0));
    }

    normalize_columns(&mut params.w_dec);
    project_columns_to_tangent(&mut m.w_dec, &params.w_dec);
}
