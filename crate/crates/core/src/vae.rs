//! MLP encoder/decoder, the one-sample ELBO, the paired-batch sampler used
//! by the critics, and the KL-term decomposition into mutual information
//! plus marginal KL.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::distributions::{self, GaussianParams};
use crate::error::{Error, Result};
use crate::metrics;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    fn apply(self, g: &mut Graph, v: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(v),
            Activation::Relu => g.relu(v),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}` (tanh|relu)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Fully connected network with an activation between layers and a linear
/// output.
#[derive(Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
    rows_seen: Cell<u64>,
}

impl Mlp {
    /// `sizes` lists every layer width including input and output. Weights
    /// are fan-in uniform, biases zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Invalid(format!("{prefix}: bad layer sizes {sizes:?}")));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = store.add_fan_in_uniform(&format!("{prefix}.{i}.w"), fan_in, fan_out, rng)?;
            let b = store.add(&format!("{prefix}.{i}.b"), Tensor::zeros(&[1, fan_out]))?;
            layers.push(Linear { w, b, fan_in, fan_out });
        }
        Ok(Self {
            layers,
            activation,
            rows_seen: Cell::new(0),
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Number of input rows pushed through this network so far.
    pub fn forward_rows(&self) -> u64 {
        self.rows_seen.get()
    }

    pub fn reset_forward_rows(&self) {
        self.rows_seen.set(0);
    }

    fn linear(&self, g: &mut Graph, store: &ParamStore, i: usize, h: Var) -> Result<Var> {
        let l = self.layers[i];
        let w = g.param(store, l.w);
        let b = g.param(store, l.b);
        let xw = g.matmul(h, w)?;
        Ok(g.add(xw, b)?)
    }

    /// Full forward pass. Returns the output and the post-activation output
    /// of the first layer (the trunk shared with a hybrid critic).
    pub fn forward_trace(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Option<Var>)> {
        self.rows_seen.set(self.rows_seen.get() + g.shape(x).0 as u64);
        let mut h = x;
        let mut first = None;
        let n = self.layers.len();
        for i in 0..n {
            h = self.linear(g, store, i, h)?;
            if i + 1 < n {
                h = self.activation.apply(g, h);
                if i == 0 {
                    first = Some(h);
                }
            }
        }
        Ok((h, first))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_trace(g, store, x)?.0)
    }
}

/// Layer sizes and activation for encoder and decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub x_dim: usize,
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.x_dim];
        s.extend(&self.hidden);
        s.push(2 * self.d_z);
        s
    }

    pub fn decoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.d_z];
        s.extend(&self.hidden);
        s.push(self.x_dim);
        s
    }

    /// Width of the first encoder hidden layer, or `x_dim` with no hidden layers.
    pub fn trunk_dim(&self) -> usize {
        self.hidden.first().copied().unwrap_or(self.x_dim)
    }

    pub fn hidden_string(&self) -> String {
        self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("arch.x_dim".into(), self.x_dim.to_string()),
            ("arch.d_z".into(), self.d_z.to_string()),
            ("arch.hidden".into(), self.hidden_string()),
            ("arch.activation".into(), self.activation.to_string()),
        ]
    }

    pub fn from_meta(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let need = |k: &str| get(k).ok_or_else(|| Error::Config(format!("checkpoint missing `{k}`")));
        let num = |k: &str| -> Result<usize> {
            need(k)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint `{k}` is not an integer")))
        };
        Ok(Self {
            x_dim: num("arch.x_dim")?,
            d_z: num("arch.d_z")?,
            hidden: parse_hidden(&need("arch.hidden")?)?,
            activation: need("arch.activation")?.parse()?,
        })
    }
}

pub fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("bad hidden layer size `{p}`")))
        })
        .collect()
}

/// Encoder output for a batch, with the reparameterized sample.
#[derive(Debug, Clone, Copy)]
pub struct Posterior {
    pub x: Var,
    pub gp: GaussianParams,
    /// First hidden activation of the encoder (`x` itself when there is none).
    pub trunk: Var,
    pub z: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// Batch mean of `recon - kl`.
    pub elbo: Var,
    pub recon: Var,
    pub kl: Var,
    /// Per-datum columns.
    pub recon_per: Var,
    pub kl_per: Var,
    pub posterior: Posterior,
}

/// Observations paired with their own posterior samples: `(xs[i], zs[i])`
/// are joint draws, `(xs[i], zs[j])` for `i != j` product-of-marginals draws.
#[derive(Debug, Clone, Copy)]
pub struct PairBatch {
    pub xs: Var,
    pub zs: Var,
    pub k: usize,
    pub posterior: Posterior,
}

#[derive(Debug)]
pub struct VaeModel {
    pub arch: Architecture,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, arch: Architecture, rng: &mut R) -> Result<Self> {
        if arch.d_z == 0 || arch.x_dim == 0 {
            return Err(Error::Invalid("x_dim and d_z must be positive".into()));
        }
        let encoder = Mlp::new(store, "enc", &arch.encoder_sizes(), arch.activation, rng)?;
        let decoder = Mlp::new(store, "dec", &arch.decoder_sizes(), arch.activation, rng)?;
        Ok(Self { arch, encoder, decoder })
    }

    pub fn d_z(&self) -> usize {
        self.arch.d_z
    }

    pub fn x_dim(&self) -> usize {
        self.arch.x_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.decoder.param_ids());
        ids
    }

    fn check_x(&self, g: &Graph, x: Var) -> Result<()> {
        let (_, c) = g.shape(x);
        if c != self.arch.x_dim {
            return Err(Error::Invalid(format!(
                "observation width {c} does not match model x_dim {}",
                self.arch.x_dim
            )));
        }
        Ok(())
    }

    /// Returns the Gaussian posterior parameters and the encoder trunk.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(GaussianParams, Var)> {
        self.check_x(g, x)?;
        let (out, first) = self.encoder.forward_trace(g, store, x)?;
        let d = self.arch.d_z;
        let mean = g.slice_cols(out, 0, d)?;
        let raw_lv = g.slice_cols(out, d, 2 * d)?;
        let gp = GaussianParams::clamped(g, mean, raw_lv)?;
        Ok((gp, first.unwrap_or(x)))
    }

    /// Pixel logits for a batch of latents.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let (_, c) = g.shape(z);
        if c != self.arch.d_z {
            return Err(Error::Invalid(format!(
                "latent width {c} does not match model d_z {}",
                self.arch.d_z
            )));
        }
        self.decoder.forward(g, store, z)
    }

    /// Encodes `x` and draws one reparameterized sample per row from `noise`.
    pub fn infer(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, noise: &Tensor) -> Result<Posterior> {
        let xv = g.constant(x)?;
        let (gp, trunk) = self.encode(g, store, xv)?;
        let nv = g.constant(noise)?;
        let z = distributions::reparam_sample(g, &gp, nv)?.z;
        Ok(Posterior { x: xv, gp, trunk, z })
    }

    /// ELBO terms for an already-sampled posterior.
    pub fn elbo_terms(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, post: Posterior) -> Result<ElboTerms> {
        let logits = self.decode(g, store, post.z)?;
        let recon_per = distributions::bernoulli_log_prob(g, x, logits)?;
        let kl_per = distributions::kl_to_std_normal(g, &post.gp)?;
        let recon = g.mean(recon_per);
        let kl = g.mean(kl_per);
        let elbo = g.sub(recon, kl)?;
        Ok(ElboTerms {
            elbo,
            recon,
            kl,
            recon_per,
            kl_per,
            posterior: post,
        })
    }

    /// One-sample reparameterized ELBO, averaged over the batch.
    pub fn elbo(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, noise: &Tensor) -> Result<ElboTerms> {
        let post = self.infer(g, store, x, noise)?;
        self.elbo_terms(g, store, x, post)
    }

    /// Per-datum `log p(x|z) + log p(z) - log q(z|x)` for one posterior draw.
    pub fn log_weight(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, noise: &Tensor) -> Result<Var> {
        let post = self.infer(g, store, x, noise)?;
        let logits = self.decode(g, store, post.z)?;
        let lpx = distributions::bernoulli_log_prob(g, x, logits)?;
        let lpz = distributions::std_normal_log_prob(g, post.z)?;
        let lqz = distributions::diag_gaussian_log_prob(g, post.z, &post.gp)?;
        let joint = g.add(lpx, lpz)?;
        Ok(g.sub(joint, lqz)?)
    }

    /// Pairs each observation with a sample from its own posterior.
    pub fn sample_pair_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
        noise: &Tensor,
    ) -> Result<PairBatch> {
        let post = self.infer(g, store, x, noise)?;
        PairBatch::from_posterior(g, post)
    }

    /// Posterior means and log-variances as plain tensors.
    pub fn posterior_params(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let (gp, _) = self.encode(&mut g, store, xv)?;
        Ok((g.value(gp.mean), g.value(gp.log_var)))
    }
}

impl PairBatch {
    pub fn from_posterior(g: &Graph, post: Posterior) -> Result<Self> {
        let k = g.shape(post.x).0;
        if k < 2 {
            return Err(Error::Invalid(format!("critic batches need at least 2 pairs, got {k}")));
        }
        Ok(Self {
            xs: post.x,
            zs: post.z,
            k,
            posterior: post,
        })
    }
}

/// Decomposition of the average KL term into mutual information and the
/// KL between aggregate posterior and prior.
#[derive(Debug, Clone, PartialEq)]
pub struct SurgeryTerms {
    pub m: usize,
    pub avg_recon: f64,
    /// Closed-form `KL(q(z|x) || p(z))`, averaged over data.
    pub avg_kl: f64,
    pub mi_raw: f64,
    pub mi: f64,
    pub marginal_kl_raw: f64,
    pub marginal_kl: f64,
    /// `avg_kl - (mi_raw + marginal_kl_raw)`.
    pub identity_residual: f64,
    /// Standard error of the residual's per-datum terms.
    pub identity_se: f64,
    pub warning: Option<String>,
}

pub const MIN_SURGERY_POINTS: usize = 64;

/// Estimates the KL-term decomposition on `x` (binary, one row per datum)
/// with one posterior draw per datum taken from `noise`.
pub fn elbo_surgery_terms(model: &VaeModel, store: &ParamStore, x: &Tensor, noise: &Tensor) -> Result<SurgeryTerms> {
    let m = x.rows();
    if m < 2 {
        return Err(Error::Invalid("surgery terms need at least 2 data points".into()));
    }
    let mut g = Graph::new();
    let terms = model.elbo(&mut g, store, x, noise)?;
    let post = terms.posterior;
    let mean = g.value(post.gp.mean);
    let lv = g.value(post.gp.log_var);
    let z = g.value(post.z);
    let kl_per = g.values(terms.kl_per).to_vec();

    let lq = metrics::log_q_matrix(&mean, &lv, &z);
    let d = model.d_z();
    let mut mi_terms = Vec::with_capacity(m);
    let mut mkl_terms = Vec::with_capacity(m);
    let mut residuals = Vec::with_capacity(m);
    for i in 0..m {
        let own = lq.at(i, i);
        let log_agg = crate::tensor::log_sum_exp_slice(lq.row(i)) - (m as f64).ln();
        let log_prior =
            -0.5 * z.row(i).iter().map(|v| v * v).sum::<f64>() - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        mi_terms.push(own - log_agg);
        mkl_terms.push(log_agg - log_prior);
        residuals.push(kl_per[i] - (own - log_prior));
    }
    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mi_raw = mean_of(&mi_terms);
    let marginal_kl_raw = mean_of(&mkl_terms);
    let avg_kl = g.item(terms.kl);
    let r_mean = mean_of(&residuals);
    let r_var = residuals.iter().map(|r| (r - r_mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    Ok(SurgeryTerms {
        m,
        avg_recon: g.item(terms.recon),
        avg_kl,
        mi_raw,
        mi: mi_raw.max(0.0),
        marginal_kl_raw,
        marginal_kl: marginal_kl_raw.max(0.0),
        identity_residual: avg_kl - (mi_raw + marginal_kl_raw),
        identity_se: (r_var / m as f64).sqrt(),
        warning: (m < MIN_SURGERY_POINTS)
            .then(|| format!("only {m} data points; at least {MIN_SURGERY_POINTS} recommended")),
    })
}
