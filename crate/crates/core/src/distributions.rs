//! Diagonal Gaussians and the Bernoulli pixel likelihood, expressed as graph
//! operations so every density is differentiable.
//!
//! All per-datum quantities are returned as `[batch, 1]` columns.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::TensorError;
use crate::tensor::{Graph, Tensor, Var};

/// Log-variance is clamped into this range before use.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Parameters of a diagonal Gaussian posterior, one row per datum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianParams {
    pub fn new(g: &Graph, mean: Var, log_var: Var) -> Result<Self, TensorError> {
        if g.shape(mean) != g.shape(log_var) {
            let (a, b) = (g.shape(mean), g.shape(log_var));
            return Err(TensorError::ShapeMismatch {
                op: "GaussianParams",
                left: vec![a.0, a.1],
                right: vec![b.0, b.1],
            });
        }
        Ok(Self { mean, log_var })
    }

    /// Clamps log-variance into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn clamped(g: &mut Graph, mean: Var, raw_log_var: Var) -> Result<Self, TensorError> {
        let lv = g.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX);
        Self::new(g, mean, lv)
    }

    pub fn batch(&self, g: &Graph) -> usize {
        g.shape(self.mean).0
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.mean).1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    Posterior,
    Prior,
    Aggregate,
}

#[derive(Debug, Clone, Copy)]
pub struct LatentBatch {
    pub z: Var,
    pub source: LatentSource,
}

/// `[rows, cols]` of independent standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data)
}

/// `z = mean + exp(log_var / 2) * noise`.
pub fn reparam_sample(g: &mut Graph, gp: &GaussianParams, noise: Var) -> Result<LatentBatch, TensorError> {
    if g.shape(noise) != g.shape(gp.mean) {
        let (a, b) = (g.shape(noise), g.shape(gp.mean));
        return Err(TensorError::ShapeMismatch {
            op: "reparam_sample",
            left: vec![a.0, a.1],
            right: vec![b.0, b.1],
        });
    }
    let half = g.scale(gp.log_var, 0.5);
    let sigma = g.exp(half);
    let scaled = g.mul(sigma, noise)?;
    let z = g.add(gp.mean, scaled)?;
    Ok(LatentBatch {
        z,
        source: LatentSource::Posterior,
    })
}

/// `sum_d [-log(2 pi)/2 - lv_d/2 - (z_d - mu_d)^2 / (2 exp(lv_d))]` per row.
pub fn diag_gaussian_log_prob(g: &mut Graph, z: Var, gp: &GaussianParams) -> Result<Var, TensorError> {
    let diff = g.sub(z, gp.mean)?;
    let sq = g.square(diff);
    let neg_lv = g.neg(gp.log_var);
    let prec = g.exp(neg_lv);
    let maha = g.mul(sq, prec)?;
    let inner = g.add(maha, gp.log_var)?;
    let s = g.sum_axis(inner, 1)?;
    let half = g.scale(s, -0.5);
    let d = g.shape(z).1 as f64;
    g.add_scalar(half, -HALF_LOG_2PI * d)
}

/// Log density of the standard normal prior, per row.
pub fn std_normal_log_prob(g: &mut Graph, z: Var) -> Result<Var, TensorError> {
    let sq = g.square(z);
    let s = g.sum_axis(sq, 1)?;
    let half = g.scale(s, -0.5);
    let d = g.shape(z).1 as f64;
    g.add_scalar(half, -HALF_LOG_2PI * d)
}

/// Closed-form `KL(N(mu, exp(lv)) || N(0, I))` per row.
pub fn kl_to_std_normal(g: &mut Graph, gp: &GaussianParams) -> Result<Var, TensorError> {
    let var = g.exp(gp.log_var);
    let mu2 = g.square(gp.mean);
    let a = g.add(var, mu2)?;
    let b = g.sub(a, gp.log_var)?;
    let c = g.add_scalar(b, -1.0)?;
    let s = g.sum_axis(c, 1)?;
    Ok(g.scale(s, 0.5))
}

/// Bernoulli log-likelihood of binary `x` under `logits`, per row, using
/// `x * l - softplus(l)`.
pub fn bernoulli_log_prob(g: &mut Graph, x: &Tensor, logits: Var) -> Result<Var, TensorError> {
    if let Some(bad) = x.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(TensorError::Domain {
            op: "bernoulli_log_prob",
            detail: format!("observation {bad} is not binary"),
        });
    }
    let xv = g.constant(x)?;
    let xl = g.mul(xv, logits)?;
    let sp = g.softplus(logits);
    let per = g.sub(xl, sp)?;
    g.sum_axis(per, 1)
}
