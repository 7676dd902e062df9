//! Joint VAE and critic training with the plateau learning-rate schedule,
//! checkpoints, and run artifacts.
//!
//! Every random draw comes from a stream keyed by `(seed, epoch, batch,
//! purpose)`. The critic consumes no randomness of its own (it scores the
//! batch's own posterior samples), so switching it off leaves every other
//! draw unchanged.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::critics::{regularized_objective, CriticConfig, CriticKind, InferenceCritic};
use crate::data::{binarize, gen_bars, load_dataset, BarsSpec, Dataset, Split};
use crate::distributions::standard_normal;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalConfig, MetricsRecord, CSV_HEADER};
use crate::rng::{stream, Purpose};
use crate::tensor::{read_checkpoint, write_checkpoint, AdamConfig, Checkpoint, Graph, ParamId, ParamStore, Tensor};
use crate::vae::{parse_hidden, Activation, Architecture, PairBatch, VaeModel};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (adam|sgd)"))),
        }
    }
}

/// Flat training configuration. Every field is addressable by name in a
/// `key = value` file and as a `--key value` override.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `bars` to generate from the `bars.*` keys, otherwise a dataset file path.
    pub data: String,
    pub bars: BarsSpec,
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub critic: Option<CriticKind>,
    pub lambda: f64,
    pub tau: f64,
    pub d_e: usize,
    pub critic_hidden: usize,
    pub symmetric: bool,
    pub detach_latent: bool,
    pub optimizer: Optimizer,
    pub lr: f64,
    /// Initial critic learning rate; `None` uses `lr`. Decays with `lr`.
    pub critic_lr: Option<f64>,
    /// Critic optimizer; `None` uses `optimizer`.
    pub critic_optimizer: Option<Optimizer>,
    pub batch_size: usize,
    pub patience: usize,
    pub decay_factor: f64,
    pub max_decays: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub nll_samples: usize,
    pub eval_points: usize,
    pub au_threshold: f64,
    pub seed: u64,
    /// Record real elapsed seconds in the `wall_s` column. Off by default
    /// so that repeated runs produce byte-identical CSVs.
    pub wall_clock: bool,
    pub out: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: "bars".into(),
            bars: BarsSpec::default(),
            d_z: 8,
            hidden: vec![128],
            activation: Activation::Tanh,
            critic: None,
            lambda: 1.0,
            tau: 1.0,
            d_e: 16,
            critic_hidden: 128,
            symmetric: false,
            detach_latent: false,
            optimizer: Optimizer::Adam,
            lr: 1e-3,
            critic_lr: None,
            critic_optimizer: None,
            batch_size: 32,
            patience: 2,
            decay_factor: 2.0,
            max_decays: 5,
            max_epochs: 200,
            eval_every: 1,
            nll_samples: 100,
            eval_points: 512,
            au_threshold: metrics::DEFAULT_AU_THRESHOLD,
            seed: 0,
            wall_clock: false,
            out: String::new(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "data",
    "bars.n_train",
    "bars.n_val",
    "bars.n_test",
    "bars.h",
    "bars.w",
    "bars.n_factors",
    "bars.noise",
    "bars.p_on",
    "bars.p_off",
    "bars.seed",
    "d_z",
    "hidden",
    "activation",
    "critic",
    "lambda",
    "tau",
    "d_e",
    "critic_hidden",
    "symmetric",
    "detach_latent",
    "optimizer",
    "lr",
    "critic_lr",
    "critic_optimizer",
    "batch_size",
    "patience",
    "decay_factor",
    "max_decays",
    "max_epochs",
    "eval_every",
    "nll_samples",
    "eval_points",
    "au_threshold",
    "seed",
    "wall_clock",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data" => self.data = v.to_string(),
            "bars.n_train" => self.bars.n_train = parse(key, v)?,
            "bars.n_val" => self.bars.n_val = parse(key, v)?,
            "bars.n_test" => self.bars.n_test = parse(key, v)?,
            "bars.h" => self.bars.h = parse(key, v)?,
            "bars.w" => self.bars.w = parse(key, v)?,
            "bars.n_factors" => self.bars.n_factors = parse(key, v)?,
            "bars.noise" => self.bars.noise = parse(key, v)?,
            "bars.p_on" => self.bars.p_on = parse(key, v)?,
            "bars.p_off" => self.bars.p_off = parse(key, v)?,
            "bars.seed" => self.bars.seed = parse(key, v)?,
            "d_z" => self.d_z = parse(key, v)?,
            "hidden" => self.hidden = parse_hidden(v)?,
            "activation" => self.activation = v.parse()?,
            "critic" => {
                self.critic = match v {
                    "none" => None,
                    other => Some(other.parse()?),
                }
            }
            "lambda" => self.lambda = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "d_e" => self.d_e = parse(key, v)?,
            "critic_hidden" => self.critic_hidden = parse(key, v)?,
            "symmetric" => self.symmetric = parse(key, v)?,
            "detach_latent" => self.detach_latent = parse(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "critic_lr" => {
                self.critic_lr = match v {
                    "" | "same" => None,
                    other => Some(parse(key, other)?),
                }
            }
            "critic_optimizer" => {
                self.critic_optimizer = match v {
                    "" | "same" => None,
                    other => Some(other.parse()?),
                }
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "max_decays" => self.max_decays = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "nll_samples" => self.nll_samples = parse(key, v)?,
            "eval_points" => self.eval_points = parse(key, v)?,
            "au_threshold" => self.au_threshold = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "wall_clock" => self.wall_clock = parse(key, v)?,
            "out" => self.out = v.to_string(),
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}`; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data" => self.data.clone(),
            "bars.n_train" => self.bars.n_train.to_string(),
            "bars.n_val" => self.bars.n_val.to_string(),
            "bars.n_test" => self.bars.n_test.to_string(),
            "bars.h" => self.bars.h.to_string(),
            "bars.w" => self.bars.w.to_string(),
            "bars.n_factors" => self.bars.n_factors.to_string(),
            "bars.noise" => self.bars.noise.to_string(),
            "bars.p_on" => self.bars.p_on.to_string(),
            "bars.p_off" => self.bars.p_off.to_string(),
            "bars.seed" => self.bars.seed.to_string(),
            "d_z" => self.d_z.to_string(),
            "hidden" => self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
            "activation" => self.activation.to_string(),
            "critic" => self.critic.map_or("none".to_string(), |c| c.to_string()),
            "lambda" => self.lambda.to_string(),
            "tau" => self.tau.to_string(),
            "d_e" => self.d_e.to_string(),
            "critic_hidden" => self.critic_hidden.to_string(),
            "symmetric" => self.symmetric.to_string(),
            "detach_latent" => self.detach_latent.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "lr" => self.lr.to_string(),
            "critic_lr" => self.critic_lr.map_or("same".to_string(), |v| v.to_string()),
            "critic_optimizer" => self.critic_optimizer.map_or("same".to_string(), |v| v.to_string()),
            "batch_size" => self.batch_size.to_string(),
            "patience" => self.patience.to_string(),
            "decay_factor" => self.decay_factor.to_string(),
            "max_decays" => self.max_decays.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "nll_samples" => self.nll_samples.to_string(),
            "eval_points" => self.eval_points.to_string(),
            "au_threshold" => self.au_threshold.to_string(),
            "seed" => self.seed.to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            "out" => self.out.clone(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the current values. `#` starts
    /// a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if matches!(self.critic_lr, Some(v) if !(v > 0.0)) {
            return bad("critic_lr must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.critic.is_some() && self.batch_size < 2 {
            return bad("batch_size must be >= 2 when a critic is enabled");
        }
        if self.d_z == 0 {
            return bad("d_z must be positive");
        }
        if !(self.decay_factor > 1.0) {
            return bad("decay_factor must exceed 1");
        }
        if self.eval_every == 0 || self.nll_samples == 0 {
            return bad("eval_every and nll_samples must be positive");
        }
        if self.eval_points < 2 {
            return bad("eval_points must be >= 2");
        }
        Ok(())
    }

    pub fn critic_config(&self) -> Option<CriticConfig> {
        self.critic.map(|kind| CriticConfig {
            kind,
            tau: self.tau,
            d_e: self.d_e,
            hidden: self.critic_hidden,
            symmetric: self.symmetric,
            detach_latent: self.detach_latent,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            nll_samples: self.nll_samples,
            mi_points: self.eval_points,
            au_threshold: self.au_threshold,
            critic_batch: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            patience: self.patience,
            factor: self.decay_factor,
            max_decays: self.max_decays,
        }
    }

    pub fn load_data(&self) -> Result<Dataset> {
        if self.data == "bars" {
            gen_bars(&self.bars)
        } else {
            let p = Path::new(&self.data);
            load_dataset(&fs::read(p).map_err(|e| Error::io(p, e))?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub max_decays: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 2,
            factor: 2.0,
            max_decays: 5,
        }
    }
}

/// Validation plateau tracker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub best: f64,
    pub since_best: usize,
    pub decays: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateauStep {
    pub decayed: bool,
    pub stop: bool,
}

impl Default for Plateau {
    fn default() -> Self {
        Self {
            best: f64::NEG_INFINITY,
            since_best: 0,
            decays: 0,
        }
    }
}

impl Plateau {
    /// A strictly better value resets the counter. After `patience` epochs
    /// without one, the rate decays and the counter restarts. Training stops
    /// at the `max_decays`-th decay.
    pub fn observe(&mut self, val: f64, cfg: &PlateauConfig) -> PlateauStep {
        if val > self.best {
            self.best = val;
            self.since_best = 0;
            return PlateauStep {
                decayed: false,
                stop: false,
            };
        }
        self.since_best += 1;
        if self.since_best >= cfg.patience && self.decays < cfg.max_decays {
            self.decays += 1;
            self.since_best = 0;
            return PlateauStep {
                decayed: true,
                stop: self.decays >= cfg.max_decays,
            };
        }
        PlateauStep {
            decayed: false,
            stop: self.decays >= cfg.max_decays,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOutcome {
    pub lr: f64,
    pub stop: bool,
    /// 1-based epochs at which the rate decayed.
    pub decay_epochs: Vec<usize>,
    /// Epoch at which training stops, if it does.
    pub stop_epoch: Option<usize>,
}

/// Replays a validation-ELBO history (higher is better) through the plateau
/// rule, ignoring anything after the stopping epoch.
pub fn plateau_schedule(history: &[f64], lr0: f64, cfg: &PlateauConfig) -> ScheduleOutcome {
    let mut p = Plateau::default();
    let mut lr = lr0;
    let mut decay_epochs = Vec::new();
    for (i, &v) in history.iter().enumerate() {
        let step = p.observe(v, cfg);
        if step.decayed {
            lr /= cfg.factor;
            decay_epochs.push(i + 1);
        }
        if step.stop {
            return ScheduleOutcome {
                lr,
                stop: true,
                decay_epochs,
                stop_epoch: Some(i + 1),
            };
        }
    }
    ScheduleOutcome {
        lr,
        stop: false,
        decay_epochs,
        stop_epoch: None,
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub store: ParamStore,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub plateau: Plateau,
    pub val_history: Vec<f64>,
    pub stopped: bool,
}

/// Loss terms of one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchTrace {
    /// `-(elbo + lambda * c)`, the minimized quantity.
    pub loss: f64,
    pub elbo: f64,
    pub critic_c: Option<f64>,
}

/// Model, critic, data and state of one training run.
#[derive(Debug)]
pub struct Session {
    pub config: TrainConfig,
    pub data: Dataset,
    pub model: VaeModel,
    pub critic: Option<InferenceCritic>,
    pub state: TrainState,
    vae_ids: Vec<ParamId>,
    critic_ids: Vec<ParamId>,
    val_x: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    /// Training seconds per epoch, excluding evaluation.
    pub epoch_seconds: Vec<f64>,
    /// Concatenated per-batch traces of every epoch run in this call.
    pub trace: Vec<BatchTrace>,
}

impl RunResult {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

impl Session {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let data = config.load_data()?;
        Self::with_data(config, data)
    }

    pub fn with_data(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        if data.indices(Split::Train).is_empty() {
            return Err(Error::Config("dataset has no training images".into()));
        }
        // Falls back to the training images when there is no usable validation split.
        let val_x = data.fixed_binary(Split::Val);
        let val_x = if val_x.rows() >= 2 {
            val_x
        } else {
            data.fixed_binary(Split::Train)
        };
        let arch = Architecture {
            x_dim: data.x_dim(),
            d_z: config.d_z,
            hidden: config.hidden.clone(),
            activation: config.activation,
        };
        let mut store = ParamStore::new();
        let mut init = stream(config.seed, 0, 0, Purpose::Init);
        let model = VaeModel::new(&mut store, arch, &mut init)?;
        let vae_ids = model.param_ids();
        let critic = match config.critic_config() {
            Some(cc) => {
                let mut init = stream(config.seed, 0, 1, Purpose::Init);
                Some(InferenceCritic::new(&mut store, cc, &model.arch, &mut init)?)
            }
            None => None,
        };
        let critic_ids = critic.as_ref().map(|c| c.param_ids()).unwrap_or_default();
        let state = TrainState {
            store,
            epoch: 0,
            lr: config.lr,
            plateau: Plateau::default(),
            val_history: Vec::new(),
            stopped: false,
        };
        Ok(Self {
            config,
            data,
            model,
            critic,
            state,
            vae_ids,
            critic_ids,
            val_x,
        })
    }

    pub fn vae_param_ids(&self) -> &[ParamId] {
        &self.vae_ids
    }

    pub fn critic_param_ids(&self) -> &[ParamId] {
        &self.critic_ids
    }

    pub fn store(&self) -> &ParamStore {
        &self.state.store
    }

    /// Validation images with their fixed binarization.
    pub fn val_x(&self) -> &Tensor {
        &self.val_x
    }

    fn critic_active(&self, rows: usize) -> bool {
        self.critic.is_some() && self.config.lambda != 0.0 && rows >= 2
    }

    fn step(&mut self, opt: Optimizer, ids: &[ParamId], grads: &crate::tensor::Gradients, lr: f64) -> Result<()> {
        match opt {
            Optimizer::Adam => self.state.store.adam_step(
                ids,
                grads,
                AdamConfig {
                    lr,
                    ..AdamConfig::default()
                },
            )?,
            Optimizer::Sgd => self.state.store.sgd_step(ids, grads, lr)?,
        }
        Ok(())
    }

    /// One combined update on a binarized batch with explicit posterior
    /// noise: builds `elbo + lambda * c`, backpropagates once, and steps the
    /// VAE and critic parameter groups. Batches of one row skip the critic.
    pub fn train_step(&mut self, x: &Tensor, noise: &Tensor, batch: usize) -> Result<BatchTrace> {
        let mut g = Graph::new();
        let store = &self.state.store;
        let terms = self.model.elbo(&mut g, store, x, noise)?;
        let use_critic = self.critic_active(x.rows());
        let c = match (&self.critic, use_critic) {
            (Some(critic), true) => {
                let pairs = PairBatch::from_posterior(&g, terms.posterior)?;
                Some(critic.objective(&mut g, store, &pairs)?)
            }
            _ => None,
        };
        let obj = regularized_objective(&mut g, terms.elbo, c, self.config.lambda)?;
        let loss = g.neg(obj);
        let trace = BatchTrace {
            loss: g.item(loss),
            elbo: g.item(terms.elbo),
            critic_c: c.map(|c| g.item(c)),
        };
        if !trace.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {} batch {batch}: loss {} (elbo {}, recon {}, kl {}, critic c {:?})",
                self.state.epoch + 1,
                trace.loss,
                trace.elbo,
                g.item(terms.recon),
                g.item(terms.kl),
                trace.critic_c
            )));
        }
        g.backward(loss)?;
        let grads = g.param_grads(store);
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {} batch {batch}: non-finite gradient (loss {})",
                self.state.epoch + 1,
                trace.loss
            )));
        }
        let lr = self.state.lr;
        let vae_ids = std::mem::take(&mut self.vae_ids);
        let r = self.step(self.config.optimizer, &vae_ids, &grads, lr);
        self.vae_ids = vae_ids;
        r?;
        if use_critic && !self.critic_ids.is_empty() {
            let clr = self.config.critic_lr.unwrap_or(self.config.lr) * (lr / self.config.lr);
            let ids = std::mem::take(&mut self.critic_ids);
            let opt = self.config.critic_optimizer.unwrap_or(self.config.optimizer);
            let r = self.step(opt, &ids, &grads, clr);
            self.critic_ids = ids;
            r?;
        }
        if !self.state.store.all_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {} batch {batch}: parameters became non-finite",
                self.state.epoch + 1
            )));
        }
        Ok(trace)
    }

    /// One pass over the shuffled training split: `ceil(N / K)` batches.
    pub fn train_epoch(&mut self) -> Result<Vec<BatchTrace>> {
        let epoch = (self.state.epoch + 1) as u64;
        let seed = self.config.seed;
        let mut idx = self.data.indices(Split::Train);
        idx.shuffle(&mut stream(seed, epoch, 0, Purpose::Shuffle));
        let batches: Vec<Vec<usize>> = idx.chunks(self.config.batch_size).map(|c| c.to_vec()).collect();
        let mut trace = Vec::with_capacity(batches.len());
        for (b, rows) in batches.iter().enumerate() {
            let probs = self.data.probs().select_rows(rows);
            let x = binarize(&probs, &mut stream(seed, epoch, b as u64, Purpose::Binarize));
            let noise = standard_normal(
                &mut stream(seed, epoch, b as u64, Purpose::Noise),
                rows.len(),
                self.model.d_z(),
            );
            trace.push(self.train_step(&x, &noise, b)?);
        }
        self.state.epoch += 1;
        Ok(trace)
    }

    /// Validation ELBO with the fixed binarization and epoch-keyed noise.
    pub fn validation_elbo(&self) -> Result<f64> {
        let mut rng = stream(self.config.seed, self.state.epoch as u64, 0, Purpose::Eval);
        let noise = standard_normal(&mut rng, self.val_x.rows(), self.model.d_z());
        let mut g = Graph::new();
        let t = self.model.elbo(&mut g, &self.state.store, &self.val_x, &noise)?;
        Ok(g.item(t.elbo))
    }

    /// Feeds the latest validation ELBO to the plateau rule.
    pub fn schedule(&mut self) -> Result<PlateauStep> {
        let v = self.validation_elbo()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation ELBO is {v} after epoch {}",
                self.state.epoch
            )));
        }
        self.state.val_history.push(v);
        let step = self.state.plateau.observe(v, &self.config.plateau());
        if step.decayed {
            self.state.lr /= self.config.decay_factor;
        }
        if step.stop {
            self.state.stopped = true;
        }
        Ok(step)
    }

    /// Metrics on the validation set after the current epoch.
    pub fn evaluate(&self, lr: f64) -> Result<MetricsRecord> {
        metrics::evaluate(
            &self.model,
            self.critic.as_ref(),
            &self.state.store,
            &self.val_x,
            &self.config.eval_config(),
            self.state.epoch,
            lr,
        )
    }

    pub fn done(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.config.max_epochs
    }

    /// Trains until the plateau rule stops or `max_epochs` is reached,
    /// evaluating every `eval_every` epochs and after the last one. With an
    /// output directory, the CSV, timing file, manifest and checkpoint are
    /// rewritten after every epoch so an interrupted run can resume.
    pub fn run(&mut self, out: Option<&Path>) -> Result<RunResult> {
        self.run_epochs(usize::MAX, out, Vec::new())
    }

    /// Like [`Session::run`] but stops after at most `limit` epochs.
    pub fn run_epochs(
        &mut self,
        limit: usize,
        out: Option<&Path>,
        mut records: Vec<MetricsRecord>,
    ) -> Result<RunResult> {
        let start = Instant::now();
        let mut epoch_seconds = Vec::new();
        let mut trace = Vec::new();
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_file(&dir.join(MANIFEST_FILE), self.manifest().as_bytes())?;
        }
        let mut ran = 0;
        while !self.done() && ran < limit {
            let t0 = Instant::now();
            trace.extend(self.train_epoch()?);
            epoch_seconds.push(t0.elapsed().as_secs_f64());
            ran += 1;
            let lr_used = self.state.lr;
            self.schedule()?;
            if self.state.epoch % self.config.eval_every == 0 || self.done() {
                let mut rec = self.evaluate(lr_used)?;
                if self.config.wall_clock {
                    rec.wall_s = start.elapsed().as_secs_f64();
                }
                records.push(rec);
            }
            if let Some(dir) = out {
                self.write_outputs(dir, &records, &epoch_seconds)?;
            }
        }
        Ok(RunResult {
            records,
            epoch_seconds,
            trace,
        })
    }

    fn write_outputs(&self, dir: &Path, records: &[MetricsRecord], epoch_seconds: &[f64]) -> Result<()> {
        write_file(&dir.join(METRICS_FILE), metrics_csv(records).as_bytes())?;
        let first = self.state.epoch + 1 - epoch_seconds.len();
        let mut timing = String::from("epoch,train_s\n");
        for (i, s) in epoch_seconds.iter().enumerate() {
            timing.push_str(&format!("{},{s:.6}\n", first + i));
        }
        write_file(&dir.join(TIMING_FILE), timing.as_bytes())?;
        write_file(&dir.join(CHECKPOINT_FILE), &write_checkpoint(&self.checkpoint()))
    }

    pub fn manifest(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.config.to_text());
        s.push_str(&format!("x_dim = {}\n", self.data.x_dim()));
        s.push_str(&format!("n_train = {}\n", self.data.indices(Split::Train).len()));
        s.push_str(&format!("n_val = {}\n", self.val_x.rows()));
        s.push_str(&format!("vae_params = {}\n", self.state.store.count(&self.vae_ids)));
        s.push_str(&format!(
            "critic_params = {}\n",
            self.state.store.count(&self.critic_ids)
        ));
        s.push_str(&format!("mi_note = {}\n", metrics::MI_NOTE));
        s.push_str(&format!("code_hash = {}\n", code_hash()));
        s
    }

    /// Parameters, Adam moments and trainer state.
    pub fn checkpoint(&self) -> Checkpoint {
        let st = &self.state;
        let mut meta: Vec<(String, String)> = CONFIG_KEYS
            .iter()
            .map(|k| (format!("config.{k}"), self.config.get(k).unwrap()))
            .collect();
        meta.extend(self.model.arch.to_meta());
        if let Some(c) = &self.critic {
            meta.extend(c.config.to_meta());
        }
        let bits = |v: f64| format!("{:016x}", v.to_bits());
        meta.extend([
            ("state.epoch".to_string(), st.epoch.to_string()),
            ("state.lr".to_string(), bits(st.lr)),
            ("state.best".to_string(), bits(st.plateau.best)),
            ("state.since_best".to_string(), st.plateau.since_best.to_string()),
            ("state.decays".to_string(), st.plateau.decays.to_string()),
            ("state.stopped".to_string(), st.stopped.to_string()),
            ("code_hash".to_string(), code_hash()),
        ]);
        let mut tensors = Vec::new();
        for id in st.store.ids() {
            let name = st.store.name(id).to_string();
            let value = st.store.value(id).clone();
            let (m, v) = st.store.moments(id);
            let shape = value.shape().to_vec();
            tensors.push((
                format!("adam.m/{name}"),
                Tensor::new(shape.clone(), m.to_vec()).unwrap(),
            ));
            tensors.push((format!("adam.v/{name}"), Tensor::new(shape, v.to_vec()).unwrap()));
            tensors.push((
                format!("adam.step/{name}"),
                Tensor::scalar(st.store.step_count(id) as f64),
            ));
            tensors.push((name, value));
        }
        tensors.push(("state.val_history".to_string(), Tensor::vector(st.val_history.clone())));
        Checkpoint { meta, tensors }
    }

    /// Rebuilds a session from a checkpoint, regenerating or reloading the
    /// dataset from the stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = config_from_checkpoint(ck)?;
        let data = config.load_data()?;
        Self::from_checkpoint_with_data(ck, data)
    }

    pub fn from_checkpoint_with_data(ck: &Checkpoint, data: Dataset) -> Result<Self> {
        let config = config_from_checkpoint(ck)?;
        let mut s = Self::with_data(config, data)?;
        let meta = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::Config(format!("checkpoint missing `{k}`")))
        };
        let bits = |k: &str| -> Result<f64> {
            u64::from_str_radix(meta(k)?, 16)
                .map(f64::from_bits)
                .map_err(|_| Error::Config(format!("checkpoint `{k}` is not hex")))
        };
        let ids: Vec<ParamId> = s.state.store.ids().collect();
        for id in ids {
            let name = s.state.store.name(id).to_string();
            let get = |n: &str| {
                ck.tensor(n)
                    .ok_or_else(|| Error::Config(format!("checkpoint missing tensor `{n}`")))
            };
            let value = get(&name)?.clone();
            let m = get(&format!("adam.m/{name}"))?.data().to_vec();
            let v = get(&format!("adam.v/{name}"))?.data().to_vec();
            let step = get(&format!("adam.step/{name}"))?.item() as u64;
            if m.len() != value.len() || v.len() != value.len() {
                return Err(Error::Config(format!(
                    "optimizer state for `{name}` has the wrong length"
                )));
            }
            s.state.store.set_value(id, value)?;
            s.state.store.set_optimizer_state(id, m, v, step);
        }
        s.state.epoch = parse("state.epoch", meta("state.epoch")?)?;
        s.state.lr = bits("state.lr")?;
        s.state.plateau = Plateau {
            best: bits("state.best")?,
            since_best: parse("state.since_best", meta("state.since_best")?)?,
            decays: parse("state.decays", meta("state.decays")?)?,
        };
        s.state.stopped = parse("state.stopped", meta("state.stopped")?)?;
        s.state.val_history = ck
            .tensor("state.val_history")
            .map(|t| t.data().to_vec())
            .unwrap_or_default();
        Ok(s)
    }

    /// Resumes from `dir/checkpoint.bin`, keeping the metrics rows already
    /// written for completed epochs.
    pub fn resume(dir: &Path) -> Result<(Self, Vec<MetricsRecord>)> {
        let path = dir.join(CHECKPOINT_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let s = Self::from_checkpoint(&read_checkpoint(&bytes)?)?;
        let csv_path = dir.join(METRICS_FILE);
        let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let records = parse_metrics_csv(&text)?
            .into_iter()
            .filter(|r| r.epoch <= s.state.epoch)
            .collect();
        Ok((s, records))
    }
}

pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    for k in CONFIG_KEYS {
        if let Some(v) = ck.meta(&format!("config.{k}")) {
            c.set(k, v)?;
        }
    }
    Ok(c)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Reads back rows written by [`metrics_csv`]. Fields not stored in the
/// CSV are filled with neutral values.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Config(format!("metrics CSV must start with `{CSV_HEADER}`"))),
    }
    let f = |s: &str| -> Result<f64> { parse("metrics field", s) };
    let o = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            f(s).map(Some)
        }
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 11 {
                return Err(Error::Config(format!(
                    "metrics row has {} fields, expected 11",
                    c.len()
                )));
            }
            Ok(MetricsRecord {
                epoch: parse("epoch", c[0])?,
                wall_s: f(c[1])?,
                elbo: f(c[2])?,
                nll: f(c[3])?,
                nll_se: f64::NAN,
                kl: f(c[4])?,
                mi_q: f(c[5])?,
                mi_q_raw: f(c[5])?,
                mi_points: 0,
                au: parse("au", c[6])?,
                critic_c: o(c[7])?,
                critic_bound: o(c[8])?,
                lr: f(c[9])?,
                seed: parse("seed", c[10])?,
                mi_note: metrics::MI_NOTE,
            })
        })
        .collect()
}

const SOURCES: &[&str] = &[
    include_str!("lib.rs"),
    include_str!("error.rs"),
    include_str!("tensor/mod.rs"),
    include_str!("tensor/graph.rs"),
    include_str!("tensor/params.rs"),
    include_str!("tensor/checkpoint.rs"),
    include_str!("tensor/gradcheck.rs"),
    include_str!("distributions.rs"),
    include_str!("vae.rs"),
    include_str!("critics.rs"),
    include_str!("metrics.rs"),
    include_str!("rng.rs"),
    include_str!("data.rs"),
    include_str!("oracle.rs"),
    include_str!("trainer.rs"),
    include_str!("diagnostics.rs"),
    include_str!("plot.rs"),
];

/// SHA-256 over the package version and library sources.
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    h.update(concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).as_bytes());
    for s in SOURCES {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
