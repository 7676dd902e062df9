//! Evaluation metrics: importance-sampled NLL, the KL term, the in-sample
//! mixture estimate of `I_q(x; z)`, active units, and the critic bound.

use std::fmt::Write as _;

use rand::Rng;

use crate::critics::{mi_lower_bound, InferenceCritic};
use crate::distributions::standard_normal;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{log_sum_exp_slice, Graph, ParamStore, Tensor};
use crate::vae::VaeModel;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

pub const CSV_HEADER: &str = "epoch,wall_s,elbo,nll,kl,mi_q,au,critic_c,critic_bound,lr,seed";

pub const MI_NOTE: &str = "in-sample mixture estimate; biased upward and capped at log M";

pub const DEFAULT_AU_THRESHOLD: f64 = 0.01;
pub const DEFAULT_NLL_SAMPLES: usize = 500;

/// Entry `(m, j)` is `log q(z_m | x_j)` for the diagonal Gaussian with
/// mean and log-variance from row `j`.
pub fn log_q_matrix(mean: &Tensor, log_var: &Tensor, z: &Tensor) -> Tensor {
    let (n, d) = mean.dims2().expect("matrix");
    assert_eq!(log_var.dims2().ok(), Some((n, d)));
    let rows = z.rows();
    assert_eq!(z.cols(), d);
    let prec: Vec<f64> = log_var.data().iter().map(|v| (-v).exp()).collect();
    let norm: Vec<f64> = (0..n)
        .map(|j| -0.5 * (log_var.row(j).iter().sum::<f64>() + d as f64 * LOG_2PI))
        .collect();
    let mut out = Vec::with_capacity(rows * n);
    for m in 0..rows {
        let zm = z.row(m);
        for j in 0..n {
            let mu = mean.row(j);
            let p = &prec[j * d..(j + 1) * d];
            let mut q = 0.0;
            for k in 0..d {
                let diff = zm[k] - mu[k];
                q += diff * diff * p[k];
            }
            out.push(norm[j] - 0.5 * q);
        }
    }
    Tensor::matrix(rows, n, out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    pub raw: f64,
    /// `raw` clipped at zero for display.
    pub clipped: f64,
    pub m: usize,
}

/// `(1/M) sum_m [log q(z_m|x_m) - log (1/M) sum_j q(z_m|x_j)]` with one
/// latent draw `z` per datum.
pub fn mi_from_params(mean: &Tensor, log_var: &Tensor, z: &Tensor) -> Result<MiEstimate> {
    let m = mean.rows();
    if m < 2 {
        return Err(Error::Invalid(format!("mutual information needs M >= 2, got {m}")));
    }
    let lq = log_q_matrix(mean, log_var, z);
    let log_m = (m as f64).ln();
    // Scores are taken relative to the diagonal so identical rows give
    // exactly zero rather than roundoff.
    let raw = (0..m)
        .map(|i| {
            let own = lq.at(i, i);
            let rel: Vec<f64> = lq.row(i).iter().map(|v| v - own).collect();
            log_m - log_sum_exp_slice(&rel)
        })
        .sum::<f64>()
        / m as f64
        + 0.0;
    Ok(MiEstimate {
        raw,
        clipped: raw.max(0.0),
        m,
    })
}

/// Encodes `x`, draws `z = mu + sigma * noise`, and applies [`mi_from_params`].
pub fn mi_hoffman_johnson(model: &VaeModel, store: &ParamStore, x: &Tensor, noise: &Tensor) -> Result<MiEstimate> {
    let (mean, lv) = model.posterior_params(store, x)?;
    if noise.shape() != mean.shape() {
        return Err(Error::Invalid("noise must match the latent batch shape".into()));
    }
    let z = Tensor::matrix(
        mean.rows(),
        mean.cols(),
        mean.data()
            .iter()
            .zip(lv.data())
            .zip(noise.data())
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect(),
    );
    mi_from_params(&mean, &lv, &z)
}

/// Number of latent dimensions whose posterior mean has unbiased sample
/// variance across the data strictly above `threshold`.
pub fn active_units_from_means(means: &Tensor, threshold: f64) -> Result<usize> {
    let (n, d) = means.dims2()?;
    if n < 2 {
        return Err(Error::Invalid("active units need at least 2 data points".into()));
    }
    let mut count = 0;
    for k in 0..d {
        let col: Vec<f64> = (0..n).map(|i| means.at(i, k)).collect();
        let mu = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        if var > threshold {
            count += 1;
        }
    }
    Ok(count)
}

pub fn active_units(model: &VaeModel, store: &ParamStore, x: &Tensor, threshold: f64) -> Result<usize> {
    let (mean, _) = model.posterior_params(store, x)?;
    active_units_from_means(&mean, threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllEstimate {
    pub mean: f64,
    pub per_datum: Vec<f64>,
    pub samples: usize,
}

impl NllEstimate {
    pub fn se(&self) -> f64 {
        std_error(&self.per_datum)
    }
}

pub fn std_error(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return f64::NAN;
    }
    let mu = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Rows of `x` processed per graph in [`nll_importance`].
const NLL_CHUNK_ROWS: usize = 4096;

/// `-[log sum_s w_s - log S]` per datum with `S` posterior draws each.
/// Noise is drawn datum by datum, `S x d_z` values at a time, so `S = 1`
/// consumes the generator exactly like one `[N, d_z]` draw.
pub fn nll_importance<R: Rng + ?Sized>(
    model: &VaeModel,
    store: &ParamStore,
    x: &Tensor,
    samples: usize,
    rng: &mut R,
) -> Result<NllEstimate> {
    if samples == 0 {
        return Err(Error::Invalid("importance sampling needs S >= 1".into()));
    }
    let (n, xd) = x.dims2()?;
    let d = model.d_z();
    let per_chunk = (NLL_CHUNK_ROWS / samples).max(1);
    let log_s = (samples as f64).ln();
    let mut per_datum = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + per_chunk).min(n);
        let rows = (end - start) * samples;
        let mut xr = Vec::with_capacity(rows * xd);
        let mut noise = Vec::with_capacity(rows * d);
        for i in start..end {
            for _ in 0..samples {
                xr.extend_from_slice(x.row(i));
            }
            noise.extend(standard_normal(rng, samples, d).into_data());
        }
        let xr = Tensor::matrix(rows, xd, xr);
        let noise = Tensor::matrix(rows, d, noise);
        let mut g = Graph::new();
        let lw = model.log_weight(&mut g, store, &xr, &noise)?;
        let w = g.values(lw);
        for c in w.chunks(samples) {
            per_datum.push(-(log_sum_exp_slice(c) - log_s));
        }
        start = end;
    }
    let mean = per_datum.iter().sum::<f64>() / n.max(1) as f64;
    Ok(NllEstimate {
        mean,
        per_datum,
        samples,
    })
}

/// Per-datum one-draw Monte Carlo ELBO `log p(x, z) - log q(z|x)`.
pub fn elbo_mc_single(model: &VaeModel, store: &ParamStore, x: &Tensor, noise: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let lw = model.log_weight(&mut g, store, x, noise)?;
    Ok(g.values(lw).to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub nll_samples: usize,
    /// Data points used for the MI and active-unit estimates.
    pub mi_points: usize,
    pub au_threshold: f64,
    /// Critic evaluation batch size `K`.
    pub critic_batch: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nll_samples: 100,
            mi_points: 512,
            au_threshold: DEFAULT_AU_THRESHOLD,
            critic_batch: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub wall_s: f64,
    pub elbo: f64,
    pub nll: f64,
    pub nll_se: f64,
    pub kl: f64,
    pub mi_q: f64,
    pub mi_q_raw: f64,
    pub mi_points: usize,
    pub au: usize,
    pub critic_c: Option<f64>,
    pub critic_bound: Option<f64>,
    pub lr: f64,
    pub seed: u64,
    pub mi_note: &'static str,
}

fn num(v: f64) -> String {
    format!("{v:.10e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

impl MetricsRecord {
    /// One CSV line (no trailing newline) in [`CSV_HEADER`] order.
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            num(self.wall_s),
            num(self.elbo),
            num(self.nll),
            num(self.kl),
            num(self.mi_q),
            self.au,
            opt(self.critic_c),
            opt(self.critic_bound),
            num(self.lr),
            self.seed
        )
        .unwrap();
        s
    }
}

/// Evaluates every metric on `x`. All randomness comes from streams keyed
/// by `cfg.seed` and `epoch`, so the record is a pure function of the inputs.
pub fn evaluate(
    model: &VaeModel,
    critic: Option<&InferenceCritic>,
    store: &ParamStore,
    x: &Tensor,
    cfg: &EvalConfig,
    epoch: usize,
    lr: f64,
) -> Result<MetricsRecord> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Invalid("evaluation set needs at least 2 rows".into()));
    }
    let d = model.d_z();
    let ep = epoch as u64;

    let mut rng = stream(cfg.seed, ep, 0, Purpose::Eval);
    let noise = standard_normal(&mut rng, n, d);
    let mut g = Graph::new();
    let terms = model.elbo(&mut g, store, x, &noise)?;
    let elbo = g.item(terms.elbo);
    let kl = g.item(terms.kl);

    let mut rng = stream(cfg.seed, ep, 1, Purpose::Eval);
    let nll = nll_importance(model, store, x, cfg.nll_samples, &mut rng)?;

    let m = cfg.mi_points.min(n).max(2);
    let xm = x.select_rows(&(0..m).collect::<Vec<_>>());
    let mut rng = stream(cfg.seed, ep, 2, Purpose::Eval);
    let noise = standard_normal(&mut rng, m, d);
    let mi = mi_hoffman_johnson(model, store, &xm, &noise)?;
    let au = active_units(model, store, &xm, cfg.au_threshold)?;

    let (critic_c, critic_bound) = match critic {
        Some(c) => {
            let k = cfg.critic_batch.min(n);
            let (cv, b) = critic_eval(model, c, store, x, k, cfg.seed, ep)?;
            (Some(cv), Some(b))
        }
        None => (None, None),
    };

    let rec = MetricsRecord {
        epoch,
        wall_s: 0.0,
        elbo,
        nll: nll.mean,
        nll_se: nll.se(),
        kl,
        mi_q: mi.clipped,
        mi_q_raw: mi.raw,
        mi_points: m,
        au,
        critic_c,
        critic_bound,
        lr,
        seed: cfg.seed,
        mi_note: MI_NOTE,
    };
    for (name, v) in [
        ("elbo", rec.elbo),
        ("nll", rec.nll),
        ("kl", rec.kl),
        ("mi_q", rec.mi_q_raw),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("evaluation produced non-finite {name}")));
        }
    }
    Ok(rec)
}

/// Mean critic objective over consecutive `K`-row batches of `x`, and the
/// matching bound `c + log K`.
pub fn critic_eval(
    model: &VaeModel,
    critic: &InferenceCritic,
    store: &ParamStore,
    x: &Tensor,
    k: usize,
    seed: u64,
    epoch: u64,
) -> Result<(f64, f64)> {
    if k < 2 {
        return Err(Error::Invalid("critic evaluation needs K >= 2".into()));
    }
    let batches = x.rows() / k;
    let mut total = 0.0;
    for b in 0..batches {
        let idx: Vec<usize> = (b * k..(b + 1) * k).collect();
        let xb = x.select_rows(&idx);
        let mut rng = stream(seed, epoch, 3 + b as u64, Purpose::Eval);
        let noise = standard_normal(&mut rng, k, model.d_z());
        let mut g = Graph::new();
        let pairs = model.sample_pair_batch(&mut g, store, &xb, &noise)?;
        let c = critic.objective(&mut g, store, &pairs)?;
        total += g.item(c);
    }
    let c = total / batches as f64;
    Ok((c, mi_lower_bound(c, k)?))
}
