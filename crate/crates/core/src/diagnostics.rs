//! Gradient checks of the training objectives on randomly drawn small
//! networks, comparing reverse-mode gradients with central differences.

use rand::Rng;

use crate::critics::{regularized_objective, CriticConfig, CriticKind, InferenceCritic};
use crate::distributions::standard_normal;
use crate::error::Result;
use crate::rng::{stream, Purpose};
use crate::tensor::{finite_diff_grad, relative_error, Gradients, Graph, ParamStore, Tensor, DEFAULT_FD_EPSILON};
use crate::vae::{Activation, Architecture, PairBatch, VaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Elbo,
    Critic,
    Regularized,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Elbo, Objective::Critic, Objective::Regularized];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Elbo => "elbo",
            Objective::Critic => "infonce",
            Objective::Regularized => "elbo_critic",
        }
    }
}

/// One randomly drawn model, critic and batch.
#[derive(Debug)]
pub struct GradcheckCase {
    pub store: ParamStore,
    pub model: VaeModel,
    pub critic: InferenceCritic,
    pub x: Tensor,
    pub noise: Tensor,
    pub lambda: f64,
}

/// Draws case `index`: at most three layers per network, at most 64 units
/// per layer, tanh activations, a random critic kind and a batch of 2 to 4.
pub fn random_case(seed: u64, index: u64) -> Result<GradcheckCase> {
    let mut rng = stream(seed, index, 0, Purpose::Init);
    let x_dim = rng.gen_range(2..=8);
    let d_z = rng.gen_range(1..=4);
    let n_hidden = rng.gen_range(0..=2);
    let hidden: Vec<usize> = (0..n_hidden).map(|_| rng.gen_range(1..=64)).collect();
    let arch = Architecture {
        x_dim,
        d_z,
        hidden,
        activation: Activation::Tanh,
    };
    let mut store = ParamStore::new();
    let model = VaeModel::new(&mut store, arch, &mut rng)?;
    let kind = [CriticKind::NeuralNetwork, CriticKind::SelfCritic, CriticKind::Hybrid][rng.gen_range(0..3)];
    let cc = CriticConfig {
        kind,
        tau: rng.gen_range(0.5..2.0),
        d_e: rng.gen_range(1..=8),
        hidden: rng.gen_range(1..=16),
        symmetric: rng.gen_bool(0.5),
        detach_latent: false,
    };
    let critic = InferenceCritic::new(&mut store, cc, &model.arch, &mut rng)?;
    // Biases start at zero; perturb them so their gradients are exercised
    // away from the symmetric starting point.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id) {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let k = rng.gen_range(2..=4);
    let x = Tensor::matrix(
        k,
        x_dim,
        (0..k * x_dim).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect(),
    );
    let noise = standard_normal(&mut rng, k, d_z);
    Ok(GradcheckCase {
        store,
        model,
        critic,
        x,
        noise,
        lambda: rng.gen_range(0.5..2.0),
    })
}

impl GradcheckCase {
    pub fn value(&self, store: &ParamStore, obj: Objective) -> Result<f64> {
        let mut g = Graph::new();
        let v = self.build(&mut g, store, obj)?;
        Ok(g.item(v))
    }

    fn build(&self, g: &mut Graph, store: &ParamStore, obj: Objective) -> Result<crate::tensor::Var> {
        let terms = self.model.elbo(g, store, &self.x, &self.noise)?;
        if obj == Objective::Elbo {
            return Ok(terms.elbo);
        }
        let pairs = PairBatch::from_posterior(g, terms.posterior)?;
        let c = self.critic.objective(g, store, &pairs)?;
        if obj == Objective::Critic {
            return Ok(c);
        }
        regularized_objective(g, terms.elbo, Some(c), self.lambda)
    }

    pub fn autodiff(&self, obj: Objective) -> Result<Gradients> {
        let mut g = Graph::new();
        let v = self.build(&mut g, &self.store, obj)?;
        g.backward(v)?;
        Ok(g.param_grads(&self.store))
    }

    pub fn numeric(&self, obj: Objective) -> Result<Gradients> {
        finite_diff_grad(|s| self.value(s, obj), &self.store, DEFAULT_FD_EPSILON)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: usize,
    /// Scalar gradient entries compared, over all objectives.
    pub entries: usize,
    pub max_rel_error: f64,
    /// `(case, objective, parameter name)` of the worst entry.
    pub worst: Option<(usize, &'static str, String)>,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn gradcheck_random_networks(seed: u64, cases: usize) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        cases,
        entries: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for i in 0..cases {
        let case = random_case(seed, i as u64)?;
        for obj in Objective::ALL {
            let a = case.autodiff(obj)?;
            let n = case.numeric(obj)?;
            for (id, t) in a.iter() {
                for (x, y) in t.data().iter().zip(n.get(id).data()) {
                    report.entries += 1;
                    let e = relative_error(*x, *y);
                    if !(e <= report.max_rel_error) {
                        report.max_rel_error = e;
                        report.worst = Some((i, obj.name(), case.store.name(id).to_string()));
                    }
                }
            }
        }
    }
    Ok(report)
}
