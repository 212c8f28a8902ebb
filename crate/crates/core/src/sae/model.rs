use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::random_unit_columns;
use crate::error::{check_dim, Error, Result};

/// Default JumpReLU threshold at initialization.
pub const JUMPRELU_THETA_INIT: f64 = 0.001;
/// Default straight-through bandwidth for JumpReLU thresholds.
pub const JUMPRELU_BANDWIDTH: f64 = 0.001;

/// Element-wise activation `h` applied to the encoder pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// ReLU, then keep the `k` largest values (ties to the lower index).
    Topk {
        k: usize,
    },
    /// `x * 1[x > theta]`; thresholds live in [`SaeParams::theta`].
    Jumprelu {
        #[serde(default = "default_bandwidth")]
        bandwidth: f64,
    },
}

fn default_bandwidth() -> f64 {
    JUMPRELU_BANDWIDTH
}

impl Activation {
    /// The sparsity norm `p` paired with this activation.
    pub fn p_norm(&self) -> u8 {
        match self {
            Activation::Jumprelu { .. } => 0,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Topk { .. } => "topk",
            Activation::Jumprelu { .. } => "jumprelu",
        }
    }
}

/// Weights and configuration of one sparse autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// `k x d`
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    /// `d x k`; columns are the learned features.
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    /// Per-feature thresholds, present only for JumpReLU.
    pub theta: Option<Array1<f64>>,
    pub activation: Activation,
    pub lambda: f64,
}

/// Loss decomposition, each part averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub sparsity: f64,
}

/// Gradients congruent to [`SaeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub theta: Option<Array1<f64>>,
}

impl SaeGrads {
    pub fn zeros_like(p: &SaeParams) -> Self {
        Self {
            w_enc: Array2::zeros(p.w_enc.raw_dim()),
            b_enc: Array1::zeros(p.b_enc.len()),
            w_dec: Array2::zeros(p.w_dec.raw_dim()),
            b_dec: Array1::zeros(p.b_dec.len()),
            theta: p.theta.as_ref().map(|t| Array1::zeros(t.len())),
        }
    }
}

/// Forward-pass intermediates kept for the backward pass.
pub struct Forward {
    pub pre: Array2<f64>,
    pub codes: Array2<f64>,
    pub recon: Array2<f64>,
}

impl SaeParams {
    /// Fresh parameters: Gaussian decoder columns normalized to unit norm,
    /// encoder = decoder transpose, zero encoder bias, decoder bias from
    /// `b_dec` (typically the training mean) or zero.
    pub fn init(
        d: usize,
        k: usize,
        activation: Activation,
        lambda: f64,
        b_dec: Option<ArrayView1<'_, f64>>,
        seed: u64,
    ) -> Result<Self> {
        if d == 0 || k <= d {
            return Err(Error::invalid(format!("dictionary size k={k} must exceed d={d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_dec = random_unit_columns(&mut rng, d, k);
        let w_enc = w_dec.t().as_standard_layout().into_owned();
        let b_dec = match b_dec {
            Some(b) => {
                check_dim(d, b.len())?;
                b.to_owned()
            }
            None => Array1::zeros(d),
        };
        let theta =
            matches!(activation, Activation::Jumprelu { .. }).then(|| Array1::from_elem(k, JUMPRELU_THETA_INIT));
        let lambda = if matches!(activation, Activation::Topk { .. }) { 0.0 } else { lambda };
        let p = Self { w_enc, b_enc: Array1::zeros(k), w_dec, b_dec, theta, activation, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.w_dec.nrows()
    }

    pub fn k(&self) -> usize {
        self.w_dec.ncols()
    }

    pub fn p_norm(&self) -> u8 {
        self.activation.p_norm()
    }

    /// Checks shapes and the structural invariants (not unit norm; see
    /// [`SaeParams::max_column_norm_error`]).
    pub fn validate(&self) -> Result<()> {
        let (d, k) = (self.d(), self.k());
        if k <= d {
            return Err(Error::invalid(format!("dictionary size k={k} must exceed d={d}")));
        }
        if self.w_enc.dim() != (k, d) {
            return Err(Error::invalid(format!("w_enc shape {:?}, expected ({k}, {d})", self.w_enc.dim())));
        }
        check_dim(k, self.b_enc.len())?;
        check_dim(d, self.b_dec.len())?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        match self.activation {
            Activation::Topk { k: keep } => {
                if keep == 0 || keep > k {
                    return Err(Error::invalid(format!("topk K={keep} must be in 1..={k}")));
                }
                if self.lambda != 0.0 {
                    return Err(Error::invalid("topk SAEs use lambda = 0"));
                }
            }
            Activation::Jumprelu { bandwidth } => {
                if bandwidth.is_nan() || bandwidth <= 0.0 {
                    return Err(Error::invalid("jumprelu bandwidth must be positive"));
                }
                let theta = self.theta.as_ref().ok_or_else(|| Error::invalid("jumprelu needs theta"))?;
                check_dim(k, theta.len())?;
                if theta.iter().any(|t| t.is_nan() || *t < 0.0) {
                    return Err(Error::invalid("jumprelu thresholds must be >= 0"));
                }
            }
            Activation::Relu => {}
        }
        if self.theta.is_some() && !matches!(self.activation, Activation::Jumprelu { .. }) {
            return Err(Error::invalid("theta only applies to jumprelu"));
        }
        Ok(())
    }

    /// Largest deviation of a decoder column norm from 1.
    pub fn max_column_norm_error(&self) -> f64 {
        self.w_dec.columns().into_iter().map(|c| (c.dot(&c).sqrt() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// `x W_enc^T + b_enc` for a batch `x` of shape `B x d`.
    pub fn pre_activations(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(self.d(), x.ncols())?;
        Ok(x.dot(&self.w_enc.t()) + &self.b_enc)
    }

    /// Applies `h` row-wise.
    pub fn activate(&self, pre: &Array2<f64>) -> Array2<f64> {
        match self.activation {
            Activation::Relu => pre.mapv(|v| v.max(0.0)),
            Activation::Topk { k } => {
                let mut out = Array2::zeros(pre.raw_dim());
                for (row, mut o) in pre.rows().into_iter().zip(out.rows_mut()) {
                    for j in topk_support(row, k) {
                        o[j] = row[j].max(0.0);
                    }
                }
                out
            }
            Activation::Jumprelu { .. } => {
                let theta = self.theta.as_ref().expect("validated jumprelu has theta");
                let mut out = pre.clone();
                Zip::from(out.rows_mut()).for_each(|mut r| {
                    Zip::from(&mut r).and(theta).for_each(|v, &t| {
                        if v.is_nan() || *v <= t {
                            *v = 0.0;
                        }
                    })
                });
                out
            }
        }
    }

    pub fn encode_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.activate(&self.pre_activations(x)?))
    }

    pub fn encode(&self, a: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let x = a.insert_axis(Axis(0));
        Ok(self.encode_batch(x)?.row(0).to_owned())
    }

    /// `c W_dec^T + b_dec` for codes of shape `B x k`.
    pub fn decode_batch(&self, c: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(self.k(), c.ncols())?;
        Ok(c.dot(&self.w_dec.t()) + &self.b_dec)
    }

    pub fn decode(&self, c: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_dim(self.k(), c.len())?;
        Ok(self.w_dec.dot(&c) + &self.b_dec)
    }

    pub fn reconstruct_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let c = self.encode_batch(x)?;
        self.decode_batch(c.view())
    }

    pub fn reconstruct(&self, a: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let c = self.encode(a)?;
        self.decode(c.view())
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        let pre = self.pre_activations(x)?;
        let codes = self.activate(&pre);
        let recon = codes.dot(&self.w_dec.t()) + &self.b_dec;
        Ok(Forward { pre, codes, recon })
    }

    /// Mean over the batch of `||a - a_hat||^2 + lambda ||c||_p`.
    pub fn loss(&self, x: ArrayView2<'_, f64>) -> Result<LossParts> {
        self.loss_with_lambda(x, self.lambda)
    }

    pub fn loss_with_lambda(&self, x: ArrayView2<'_, f64>, lambda: f64) -> Result<LossParts> {
        check_batch(x)?;
        let fwd = self.forward(x)?;
        Ok(self.loss_parts(x, &fwd, lambda))
    }

    fn loss_parts(&self, x: ArrayView2<'_, f64>, fwd: &Forward, lambda: f64) -> LossParts {
        let b = x.nrows() as f64;
        let recon = (&fwd.recon - &x).mapv(|v| v * v).sum() / b;
        let norm_sum = match self.p_norm() {
            0 => fwd.codes.iter().filter(|v| **v != 0.0).count() as f64,
            _ => fwd.codes.iter().map(|v| v.abs()).sum(),
        };
        let sparsity = lambda * norm_sum / b;
        LossParts { total: recon + sparsity, recon, sparsity }
    }

    /// Loss and analytic gradients with the configured lambda.
    pub fn loss_gradients(&self, x: ArrayView2<'_, f64>) -> Result<(LossParts, SaeGrads)> {
        self.loss_gradients_with_lambda(x, self.lambda)
    }

    /// Loss and analytic gradients of the batch-mean loss.
    ///
    /// The ReLU kink has subgradient 0, TopK routes gradient only through
    /// kept coordinates, and JumpReLU thresholds get a rectangle-kernel
    /// straight-through pseudo-gradient for both the reconstruction and the
    /// L0 term. Decoder-column gradients are projected onto the tangent
    /// space of the unit sphere.
    pub fn loss_gradients_with_lambda(&self, x: ArrayView2<'_, f64>, lambda: f64) -> Result<(LossParts, SaeGrads)> {
        self.backward(x, lambda).map(|(parts, grads, _)| (parts, grads))
    }

    pub(crate) fn backward(&self, x: ArrayView2<'_, f64>, lambda: f64) -> Result<(LossParts, SaeGrads, Forward)> {
        check_batch(x)?;
        let fwd = self.forward(x)?;
        let parts = self.loss_parts(x, &fwd, lambda);
        let b = x.nrows() as f64;

        // dL/d recon = 2/B (recon - x)
        let d_recon = (&fwd.recon - &x) * (2.0 / b);
        let mut w_dec = d_recon.t().dot(&fwd.codes);
        let b_dec = d_recon.sum_axis(Axis(0));
        let mut d_codes = d_recon.dot(&self.w_dec);
        let mut theta_grad = None;

        match self.activation {
            Activation::Relu | Activation::Topk { .. } => {
                if self.p_norm() == 1 && lambda != 0.0 {
                    // codes are >= 0, so d|c|/dc = 1 on the active set (masked below).
                    d_codes += lambda / b;
                }
                // active set: c > 0 (covers ReLU kink and TopK dropped coordinates)
                Zip::from(&mut d_codes).and(&fwd.codes).for_each(|g, &c| {
                    if c.is_nan() || c <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            Activation::Jumprelu { bandwidth } => {
                let theta = self.theta.as_ref().expect("validated jumprelu has theta");
                let mut tg = Array1::<f64>::zeros(self.k());
                for (pre_row, dc_row) in fwd.pre.rows().into_iter().zip(d_codes.rows()) {
                    for j in 0..self.k() {
                        let z = pre_row[j];
                        let t = theta[j];
                        if ((z - t) / bandwidth).abs() < 0.5 {
                            // d/dtheta [z H(z - theta)] ~ -(theta/eps) K((z - theta)/eps)
                            // d/dtheta [H(z - theta)]   ~ -(1/eps)     K((z - theta)/eps)
                            tg[j] += -(t / bandwidth) * dc_row[j] - lambda / (b * bandwidth);
                        }
                    }
                }
                theta_grad = Some(tg);
                Zip::from(&mut d_codes).and(&fwd.codes).for_each(|g, &c| {
                    if c == 0.0 {
                        *g = 0.0;
                    }
                });
            }
        }

        let w_enc = d_codes.t().dot(&x);
        let b_enc = d_codes.sum_axis(Axis(0));
        project_columns_to_tangent(&mut w_dec, &self.w_dec);

        Ok((parts, SaeGrads { w_enc, b_enc, w_dec, b_dec, theta: theta_grad }, fwd))
    }
}

/// Removes from every column of `grad` its component along the matching
/// (unit-norm) column of `w`.
pub fn project_columns_to_tangent(grad: &mut Array2<f64>, w: &Array2<f64>) {
    for (mut g, f) in grad.columns_mut().into_iter().zip(w.columns()) {
        let along = g.dot(&f);
        g.scaled_add(-along, &f);
    }
}

/// Renormalizes every column of `w` to unit Euclidean norm.
pub fn normalize_columns(w: &mut Array2<f64>) {
    for mut col in w.columns_mut() {
        let n = col.dot(&col).sqrt();
        if n > 0.0 {
            col /= n;
        }
    }
}

/// Indices kept by TopK: the `k` largest values of `relu(row)`, ties broken
/// by lower index.
pub fn topk_support(row: ArrayView1<'_, f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let key = |i: &usize| row[*i].max(0.0);
    let cmp = |a: &usize, b: &usize| key(b).total_cmp(&key(a)).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

fn check_batch(x: ArrayView2<'_, f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in batch"));
    }
    Ok(())
}
