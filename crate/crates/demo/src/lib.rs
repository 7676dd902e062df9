//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a JSON string; the page draws it on a canvas.

use fmn_core::critics::{infonce_loss, mi_lower_bound, score_matrix_self};
use fmn_core::distributions::{reparam_sample, standard_normal, GaussianParams};
use fmn_core::oracle::{exact_mi, infonce_on_oracle, DiscreteJoint, OracleConfig};
use fmn_core::rng::{stream, Purpose};
use fmn_core::tensor::{Graph, Tensor};
use fmn_core::trainer::{Session, TrainConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: fmn_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Trains a tabular critic on `joint` for every batch size in `ks`
/// (comma separated) and reports the bound next to `log K` and the exact MI.
#[wasm_bindgen]
pub fn oracle_sweep(joint: &str, ks: &str, steps: usize, seed: u64) -> Result<String, JsValue> {
    let dist = DiscreteJoint::parse(joint).map_err(js_err)?;
    let mut points = Vec::new();
    for k in ks.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let k: usize = k.parse().map_err(|_| JsValue::from_str(&format!("bad K `{k}`")))?;
        let cfg = OracleConfig {
            k,
            steps,
            replicates: 3,
            seed,
            ..OracleConfig::default()
        };
        let r = infonce_on_oracle(&dist, joint, &cfg).map_err(js_err)?;
        points.push(json!({ "k": k, "log_k": (k as f64).ln(), "bound": r.mean, "se": r.se }));
    }
    Ok(json!({ "joint": joint, "exact_mi": exact_mi(&dist), "points": points }).to_string())
}

/// Self-critic score table for `k` one-dimensional posteriors with means
/// `0, spacing, 2 spacing, ...` and a shared standard deviation `sigma`.
#[wasm_bindgen]
pub fn self_critic_table(k: usize, spacing: f64, sigma: f64, seed: u64) -> Result<String, JsValue> {
    self_critic_json(k, spacing, sigma, seed).map_err(js_err)
}

pub fn self_critic_json(k: usize, spacing: f64, sigma: f64, seed: u64) -> fmn_core::Result<String> {
    if k < 2 || !(sigma > 0.0) {
        return Err(fmn_core::Error::Invalid("need k >= 2 and sigma > 0".into()));
    }
    {
        let mut g = Graph::new();
        let mean = g.constant(&Tensor::matrix(k, 1, (0..k).map(|i| i as f64 * spacing).collect()))?;
        let lv = g.constant(&Tensor::full(&[k, 1], 2.0 * sigma.ln()))?;
        let gp = GaussianParams::new(&g, mean, lv)?;
        let noise = g.constant(&standard_normal(&mut stream(seed, 0, 0, Purpose::Noise), k, 1))?;
        let z = reparam_sample(&mut g, &gp, noise)?.z;
        let s = score_matrix_self(&mut g, z, &gp)?;
        let loss = infonce_loss(&mut g, &s)?;
        let c = g.item(loss);
        let vals = g.values(s.scores);
        let rows: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| vals[i * k + j]).collect()).collect();
        Ok(
            json!({ "k": k, "scores": rows, "c": c, "bound": mi_lower_bound(c, k)?, "log_k": (k as f64).ln() })
                .to_string(),
        )
    }
}

/// A small VAE on weak-signal bars data (collapse-prone without a critic),
/// trained one epoch per [`Trainer::step`].
#[wasm_bindgen]
pub struct Trainer {
    session: Session,
}

#[wasm_bindgen]
impl Trainer {
    /// `critic` is `none`, `nn`, `self` or `hybrid`.
    #[wasm_bindgen(constructor)]
    pub fn new(critic: &str, lambda: f64, seed: u64) -> Result<Trainer, JsValue> {
        let mut c = TrainConfig::default();
        let settings = [
            ("bars.n_train", "512".to_string()),
            ("bars.n_val", "128".to_string()),
            ("bars.n_test", "0".to_string()),
            ("bars.p_on", "0.6".to_string()),
            ("bars.p_off", "0.4".to_string()),
            ("hidden", "64".to_string()),
            ("activation", "relu".to_string()),
            ("optimizer", "sgd".to_string()),
            ("lr", "0.02".to_string()),
            ("critic_optimizer", "adam".to_string()),
            ("nll_samples", "10".to_string()),
            ("eval_points", "128".to_string()),
            ("critic", critic.to_string()),
            ("lambda", lambda.to_string()),
            ("seed", seed.to_string()),
        ];
        for (k, v) in settings {
            c.set(k, &v).map_err(js_err)?;
        }
        Ok(Trainer {
            session: Session::new(c).map_err(js_err)?,
        })
    }

    /// Runs one epoch and returns that epoch's validation metrics.
    pub fn step(&mut self) -> Result<String, JsValue> {
        self.session.train_epoch().map_err(js_err)?;
        let r = self.session.evaluate(self.session.config.lr).map_err(js_err)?;
        Ok(json!({
            "epoch": r.epoch,
            "elbo": r.elbo,
            "kl": r.kl,
            "mi": r.mi_q,
            "au": r.au,
            "bound": r.critic_bound,
        })
        .to_string())
    }
}
