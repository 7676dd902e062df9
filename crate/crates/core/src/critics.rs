//! Inference critics and the contrastive pairing objective.
//!
//! A critic assigns a score to every `(x_i, z_j)` in a batch. For each
//! latent `z_j` the objective is the log-softmax probability, over all
//! observations in the batch, of its true partner `x_j`. The batch mean `c`
//! is at most zero and `c + log K` lower-bounds `I(x; z)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::distributions::GaussianParams;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::vae::{Architecture, Mlp, PairBatch};

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// `c` values above this are treated as a broken loss.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Square `K x K` table of scores; entry `(i, j)` scores `(x_i, z_j)`.
#[derive(Debug, Clone, Copy)]
pub struct ScoreMatrix {
    pub scores: Var,
    pub k: usize,
}

impl ScoreMatrix {
    pub fn new(g: &Graph, scores: Var) -> Result<Self> {
        let (r, c) = g.shape(scores);
        if r != c || r < 2 {
            return Err(Error::Invalid(format!(
                "score matrix must be square with K >= 2, got {r}x{c}"
            )));
        }
        Ok(Self { scores, k: r })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    NeuralNetwork,
    SelfCritic,
    Hybrid,
}

impl CriticKind {
    pub fn name(self) -> &'static str {
        match self {
            CriticKind::NeuralNetwork => "nn",
            CriticKind::SelfCritic => "self",
            CriticKind::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for CriticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CriticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(CriticKind::NeuralNetwork),
            "self" => Ok(CriticKind::SelfCritic),
            "hybrid" => Ok(CriticKind::Hybrid),
            other => Err(Error::Config(format!("unknown critic `{other}` (none|nn|self|hybrid)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub kind: CriticKind,
    /// Temperature dividing inner-product scores.
    pub tau: f64,
    /// Embedding width.
    pub d_e: usize,
    /// Hidden width of the embedding networks.
    pub hidden: usize,
    /// Average the observation-side and latent-side softmax directions.
    pub symmetric: bool,
    /// Stop the critic gradient from reaching the encoder through `z`.
    pub detach_latent: bool,
}

impl CriticConfig {
    pub fn new(kind: CriticKind) -> Self {
        Self {
            kind,
            tau: 1.0,
            d_e: 16,
            hidden: 128,
            symmetric: false,
            detach_latent: false,
        }
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("critic.kind".into(), self.kind.to_string()),
            ("critic.tau".into(), self.tau.to_string()),
            ("critic.d_e".into(), self.d_e.to_string()),
            ("critic.hidden".into(), self.hidden.to_string()),
            ("critic.symmetric".into(), self.symmetric.to_string()),
            ("critic.detach_latent".into(), self.detach_latent.to_string()),
        ]
    }
}

#[derive(Debug)]
pub enum CriticNets {
    NeuralNetwork { embed_x: Mlp, embed_z: Mlp },
    SelfCritic,
    Hybrid { head_x: Mlp, embed_z: Mlp },
}

/// A critic together with its hyperparameters.
#[derive(Debug)]
pub struct InferenceCritic {
    pub config: CriticConfig,
    pub nets: CriticNets,
}

impl InferenceCritic {
    /// Creates the critic's own parameters. The hybrid head reads the first
    /// encoder hidden layer, so it shares that layer's parameters with the
    /// encoder rather than copying them.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: CriticConfig,
        arch: &Architecture,
        rng: &mut R,
    ) -> Result<Self> {
        if config.tau <= 0.0 {
            return Err(Error::Config("critic tau must be positive".into()));
        }
        let act = arch.activation;
        let nets = match config.kind {
            CriticKind::NeuralNetwork => CriticNets::NeuralNetwork {
                embed_x: Mlp::new(store, "critic.x", &[arch.x_dim, config.hidden, config.d_e], act, rng)?,
                embed_z: Mlp::new(store, "critic.z", &[arch.d_z, config.hidden, config.d_e], act, rng)?,
            },
            CriticKind::SelfCritic => CriticNets::SelfCritic,
            // Only linear maps past the shared trunk, so the extra work per batch stays small.
            CriticKind::Hybrid => CriticNets::Hybrid {
                head_x: Mlp::new(store, "critic.head", &[arch.trunk_dim(), config.d_e], act, rng)?,
                embed_z: Mlp::new(store, "critic.z", &[arch.d_z, config.d_e], act, rng)?,
            },
        };
        Ok(Self { config, nets })
    }

    pub fn kind(&self) -> CriticKind {
        self.config.kind
    }

    /// Parameters owned by the critic (empty for the self-critic).
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.nets {
            CriticNets::NeuralNetwork { embed_x, embed_z } => {
                let mut v = embed_x.param_ids();
                v.extend(embed_z.param_ids());
                v
            }
            CriticNets::SelfCritic => vec![],
            CriticNets::Hybrid { head_x, embed_z } => {
                let mut v = head_x.param_ids();
                v.extend(embed_z.param_ids());
                v
            }
        }
    }

    pub fn scores(&self, g: &mut Graph, store: &ParamStore, pairs: &PairBatch) -> Result<ScoreMatrix> {
        let zs = if self.config.detach_latent {
            g.detach(pairs.zs)
        } else {
            pairs.zs
        };
        let tau = self.config.tau;
        match &self.nets {
            CriticNets::NeuralNetwork { embed_x, embed_z } => {
                score_matrix_nn(g, store, pairs.xs, zs, embed_x, embed_z, tau)
            }
            CriticNets::SelfCritic => {
                let gp = if self.config.detach_latent {
                    let m = g.detach(pairs.posterior.gp.mean);
                    let lv = g.detach(pairs.posterior.gp.log_var);
                    GaussianParams::new(g, m, lv)?
                } else {
                    pairs.posterior.gp
                };
                score_matrix_self(g, zs, &gp)
            }
            CriticNets::Hybrid { head_x, embed_z } => {
                score_matrix_hybrid(g, store, pairs.posterior.trunk, zs, head_x, embed_z, tau)
            }
        }
    }

    /// The critic objective `c` for one batch.
    pub fn objective(&self, g: &mut Graph, store: &ParamStore, pairs: &PairBatch) -> Result<Var> {
        let s = self.scores(g, store, pairs)?;
        if self.config.symmetric {
            infonce_loss_symmetric(g, &s)
        } else {
            infonce_loss(g, &s)
        }
    }
}

fn inner_product_scores(g: &mut Graph, ex: Var, ez: Var, tau: f64) -> Result<Var> {
    let ezt = g.transpose(ez);
    let s = g.matmul(ex, ezt)?;
    Ok(if tau == 1.0 { s } else { g.scale(s, 1.0 / tau) })
}

/// Separable critic: `<embed_x(x_i), embed_z(z_j)> / tau`. Each side is
/// embedded once, so a batch costs `2K` network row passes plus one `K x K`
/// inner-product table.
pub fn score_matrix_nn(
    g: &mut Graph,
    store: &ParamStore,
    xs: Var,
    zs: Var,
    embed_x: &Mlp,
    embed_z: &Mlp,
    tau: f64,
) -> Result<ScoreMatrix> {
    if g.shape(xs).0 != g.shape(zs).0 {
        return Err(Error::Invalid("xs and zs must have the same batch size".into()));
    }
    let ex = embed_x.forward(g, store, xs)?;
    let ez = embed_z.forward(g, store, zs)?;
    let s = inner_product_scores(g, ex, ez, tau)?;
    ScoreMatrix::new(g, s)
}

/// Self-critic: `scores(i, j) = log q(z_j | x_i)`, computed from the encoder
/// outputs already produced for the batch. Uses the expansion
/// `(z - mu)^2 / s^2 = z^2/s^2 - 2 z mu/s^2 + mu^2/s^2` so the whole table
/// is three matrix products.
pub fn score_matrix_self(g: &mut Graph, zs: Var, gp: &GaussianParams) -> Result<ScoreMatrix> {
    let (k, d) = g.shape(gp.mean);
    if g.shape(zs) != (k, d) {
        return Err(Error::Invalid("zs must match the posterior parameter shape".into()));
    }
    let neg_lv = g.neg(gp.log_var);
    let prec = g.exp(neg_lv); // K x d
    let z2 = g.square(zs);
    let z2t = g.transpose(z2);
    let t1 = g.matmul(prec, z2t)?; // (i, j): sum_d prec_id z_jd^2
    let mu_prec = g.mul(gp.mean, prec)?;
    let zt = g.transpose(zs);
    let t2 = g.matmul(mu_prec, zt)?; // (i, j): sum_d mu_id prec_id z_jd
    let mu2 = g.square(gp.mean);
    let mu2p = g.mul(mu2, prec)?;
    let t3 = g.sum_axis(mu2p, 1)?; // K x 1
    let lvs = g.sum_axis(gp.log_var, 1)?; // K x 1
    let t2x2 = g.scale(t2, 2.0);
    let a = g.sub(t1, t2x2)?;
    let row_terms = g.add(t3, lvs)?;
    let b = g.add(a, row_terms)?;
    let half = g.scale(b, -0.5);
    let s = g.add_scalar(half, -HALF_LOG_2PI * d as f64)?;
    ScoreMatrix::new(g, s)
}

/// Hybrid critic: `<head_x(trunk(x_i)), embed_z(z_j)> / tau`, where the
/// trunk is the encoder's first hidden layer.
pub fn score_matrix_hybrid(
    g: &mut Graph,
    store: &ParamStore,
    trunk_out: Var,
    zs: Var,
    head_x: &Mlp,
    embed_z: &Mlp,
    tau: f64,
) -> Result<ScoreMatrix> {
    let (k, h) = g.shape(trunk_out);
    if h != head_x.input_dim() {
        return Err(Error::Invalid(format!(
            "trunk width {h} does not match head input {}",
            head_x.input_dim()
        )));
    }
    if g.shape(zs).0 != k {
        return Err(Error::Invalid("trunk and zs must have the same batch size".into()));
    }
    let ex = head_x.forward(g, store, trunk_out)?;
    let ez = embed_z.forward(g, store, zs)?;
    let s = inner_product_scores(g, ex, ez, tau)?;
    ScoreMatrix::new(g, s)
}

fn diag(g: &mut Graph, s: Var, k: usize, axis: usize) -> Result<Var> {
    let eye = g.constant(&Tensor::identity(k))?;
    let masked = g.mul(s, eye)?;
    Ok(g.sum_axis(masked, axis)?)
}

/// `c = (1/K) sum_j [s(j, j) - log sum_i exp s(i, j)]`: each latent picks
/// its observation from the batch.
pub fn infonce_loss(g: &mut Graph, s: &ScoreMatrix) -> Result<Var> {
    let d = diag(g, s.scores, s.k, 0)?; // 1 x K
    let lse = g.log_sum_exp(s.scores, 0)?; // 1 x K
    let per = g.sub(d, lse)?;
    Ok(g.mean(per))
}

/// Row direction: each observation picks its latent.
pub fn infonce_loss_rows(g: &mut Graph, s: &ScoreMatrix) -> Result<Var> {
    let d = diag(g, s.scores, s.k, 1)?; // K x 1
    let lse = g.log_sum_exp(s.scores, 1)?;
    let per = g.sub(d, lse)?;
    Ok(g.mean(per))
}

/// Mean of the two softmax directions.
pub fn infonce_loss_symmetric(g: &mut Graph, s: &ScoreMatrix) -> Result<Var> {
    let a = infonce_loss(g, s)?;
    let b = infonce_loss_rows(g, s)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, 0.5))
}

/// `c + log K`, the critic's mutual-information lower bound.
pub fn mi_lower_bound(c: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Invalid(format!("bound needs K >= 2, got {k}")));
    }
    if !(c <= BOUND_TOLERANCE) {
        return Err(Error::Invalid(format!(
            "critic objective {c} is positive; the softmax loss must be <= 0"
        )));
    }
    Ok(c + (k as f64).ln())
}

/// `elbo + lambda * c`. With `lambda == 0` or no critic the ELBO node is
/// returned unchanged.
pub fn regularized_objective(g: &mut Graph, elbo: Var, c: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    match c {
        Some(c) if lambda != 0.0 => {
            let scaled = if lambda == 1.0 { c } else { g.scale(c, lambda) };
            Ok(g.add(elbo, scaled)?)
        }
        _ => Ok(elbo),
    }
}
