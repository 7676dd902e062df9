use fmn_core::critics::{
    infonce_loss, infonce_loss_symmetric, mi_lower_bound, regularized_objective, CriticConfig, CriticKind, CriticNets,
    InferenceCritic, ScoreMatrix,
};
use fmn_core::distributions::{diag_gaussian_log_prob, standard_normal, GaussianParams};
use fmn_core::rng::{stream, Purpose};
use fmn_core::tensor::{finite_diff_grad, relative_error, Graph, ParamStore, Tensor};
use fmn_core::vae::{Activation, Architecture, PairBatch, VaeModel};
use proptest::prelude::*;

fn c_of(t: &Tensor) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(t).unwrap();
    let s = ScoreMatrix::new(&g, v).unwrap();
    let c = infonce_loss(&mut g, &s).unwrap();
    g.item(c)
}

fn square(k: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-20.0..20.0f64, k * k).prop_map(move |v| Tensor::matrix(k, k, v))
}

fn any_square() -> impl Strategy<Value = Tensor> {
    (2usize..10).prop_flat_map(square)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn objective_is_nonpositive(t in any_square()) {
        let c = c_of(&t);
        prop_assert!(c <= 0.0);
        prop_assert!(mi_lower_bound(c, t.rows()).unwrap() <= (t.rows() as f64).ln());
    }

    #[test]
    fn global_shift_invariance(t in any_square(), shift in -100.0..100.0f64) {
        let shifted = t.map(|v| v + shift);
        prop_assert!((c_of(&t) - c_of(&shifted)).abs() < 1e-10);
    }

    /// A constant added to one column (one latent's scores against every
    /// observation) leaves the column softmax unchanged.
    #[test]
    fn column_constant_invariance(t in any_square(), col in 0usize..10, shift in -50.0..50.0f64) {
        let k = t.rows();
        let col = col % k;
        let mut s = t.clone();
        for i in 0..k {
            s.data_mut()[i * k + col] += shift;
        }
        prop_assert!((c_of(&t) - c_of(&s)).abs() < 1e-10);
    }

    #[test]
    fn permutation_equivariance(t in any_square(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let k = t.rows();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut stream(seed, 0, 0, Purpose::Shuffle));
        let mut p = Tensor::zeros(&[k, k]);
        for i in 0..k {
            for j in 0..k {
                p.data_mut()[i * k + j] = t.at(perm[i], perm[j]);
            }
        }
        prop_assert!((c_of(&t) - c_of(&p)).abs() < 1e-12);
    }

    /// With every diagonal entry strictly dominating its column, the implied
    /// classifier picks the true pair for every latent.
    #[test]
    fn argmax_recovers_diagonal(t in any_square(), margin in 0.01..5.0f64) {
        let k = t.rows();
        let mut s = t.clone();
        for j in 0..k {
            let best = (0..k).filter(|&i| i != j).map(|i| t.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            s.data_mut()[j * k + j] = best + margin;
        }
        for j in 0..k {
            let col: Vec<f64> = (0..k).map(|i| s.at(i, j)).collect();
            let arg = (0..k).max_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap()).unwrap();
            prop_assert_eq!(arg, j);
        }
        prop_assert!(c_of(&s) > -(k as f64).ln());
    }
}

#[test]
fn row_constant_does_change_column_loss_but_not_row_loss() {
    // Row shifts are absorbed by the other softmax direction; the symmetric
    // loss moves by half the column-direction change.
    let t = Tensor::from_rows(&[vec![1.0, 0.2, -0.5], vec![0.0, 2.0, 0.3], vec![0.4, -1.0, 1.5]]);
    let mut s = t.clone();
    for j in 0..3 {
        s.data_mut()[j] += 2.0;
    }
    let sym = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t).unwrap();
        let sm = ScoreMatrix::new(&g, v).unwrap();
        let c = infonce_loss_symmetric(&mut g, &sm).unwrap();
        g.item(c)
    };
    let dc = c_of(&s) - c_of(&t);
    assert!(dc.abs() > 1e-3);
    assert!((sym(&s) - sym(&t) - dc / 2.0).abs() < 1e-12);
}

fn setup(kind: CriticKind, hidden: Vec<usize>, seed: u64) -> (ParamStore, VaeModel, InferenceCritic) {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, 0, 0, Purpose::Init);
    let arch = Architecture {
        x_dim: 6,
        d_z: 3,
        hidden,
        activation: Activation::Tanh,
    };
    let m = VaeModel::new(&mut store, arch, &mut rng).unwrap();
    let mut cc = CriticConfig::new(kind);
    cc.d_e = 4;
    cc.hidden = 8;
    let c = InferenceCritic::new(&mut store, cc, &m.arch, &mut rng).unwrap();
    (store, m, c)
}

fn batch(k: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = stream(seed, 0, 0, Purpose::Binarize);
    let probs = Tensor::full(&[k, 6], 0.5);
    let x = fmn_core::data::binarize(&probs, &mut rng);
    (x, standard_normal(&mut stream(seed, 0, 0, Purpose::Noise), k, 3))
}

#[test]
fn nn_critic_runs_exactly_2k_rows() {
    for k in [2, 7, 32] {
        let (s, m, c) = setup(CriticKind::NeuralNetwork, vec![5], 1);
        let (x, n) = batch(k, 1);
        let mut g = Graph::new();
        let p = m.sample_pair_batch(&mut g, &s, &x, &n).unwrap();
        c.objective(&mut g, &s, &p).unwrap();
        let CriticNets::NeuralNetwork { embed_x, embed_z } = &c.nets else {
            unreachable!()
        };
        assert_eq!(embed_x.forward_rows() + embed_z.forward_rows(), 2 * k as u64);
    }
}

#[test]
fn zero_embeddings_give_minus_log_k() {
    for kind in [CriticKind::NeuralNetwork, CriticKind::Hybrid] {
        let (mut s, m, c) = setup(kind, vec![5], 2);
        for id in c.param_ids() {
            s.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let (x, n) = batch(5, 2);
        let mut g = Graph::new();
        let p = m.sample_pair_batch(&mut g, &s, &x, &n).unwrap();
        let v = c.objective(&mut g, &s, &p).unwrap();
        assert!((g.item(v) + 5f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn collapsed_encoder_gives_minus_log_k_for_self_critic() {
    let (mut s, m, c) = setup(CriticKind::SelfCritic, vec![5], 3);
    for id in m.encoder.param_ids() {
        s.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let (x, n) = batch(6, 3);
    let mut g = Graph::new();
    let p = m.sample_pair_batch(&mut g, &s, &x, &n).unwrap();
    let v = c.objective(&mut g, &s, &p).unwrap();
    assert!((g.item(v) + 6f64.ln()).abs() < 1e-12);
}

#[test]
fn self_scores_are_posterior_log_densities() {
    let (s, m, c) = setup(CriticKind::SelfCritic, vec![5], 4);
    let (x, n) = batch(4, 4);
    let mut g = Graph::new();
    let p = m.sample_pair_batch(&mut g, &s, &x, &n).unwrap();
    let sm = c.scores(&mut g, &s, &p).unwrap();
    let scores = g.value(sm.scores);
    let mu = g.value(p.posterior.gp.mean);
    let lv = g.value(p.posterior.gp.log_var);
    let z = g.value(p.zs);
    for i in 0..4 {
        for j in 0..4 {
            let mut h = Graph::new();
            let zj = h.constant(&Tensor::matrix(1, 3, z.row(j).to_vec())).unwrap();
            let mi = h.constant(&Tensor::matrix(1, 3, mu.row(i).to_vec())).unwrap();
            let li = h.constant(&Tensor::matrix(1, 3, lv.row(i).to_vec())).unwrap();
            let gp = GaussianParams::new(&h, mi, li).unwrap();
            let lp = diag_gaussian_log_prob(&mut h, zj, &gp).unwrap();
            assert!((h.item(lp) - scores.at(i, j)).abs() < 1e-10);
        }
    }
}

/// Identity encoder on a 1-d problem with tiny variance: the diagonal
/// dominates and c approaches zero from below.
#[test]
fn sharp_self_critic_is_near_zero() {
    let k = 8;
    let mut g = Graph::new();
    let mu = g
        .constant(&Tensor::matrix(k, 1, (0..k).map(|i| i as f64).collect()))
        .unwrap();
    let lv = g.constant(&Tensor::full(&[k, 1], 2.0 * (1e-3f64).ln())).unwrap();
    let gp = GaussianParams::new(&g, mu, lv).unwrap();
    let noise = g
        .constant(&standard_normal(&mut stream(0, 0, 0, Purpose::Noise), k, 1))
        .unwrap();
    let z = fmn_core::distributions::reparam_sample(&mut g, &gp, noise).unwrap().z;
    let s = fmn_core::critics::score_matrix_self(&mut g, z, &gp).unwrap();
    let c = infonce_loss(&mut g, &s).unwrap();
    assert!(g.item(c) > -0.01 && g.item(c) <= 0.0);
}

#[test]
fn parameter_counts_are_ordered() {
    let count = |kind| {
        let (s, _, c) = setup(kind, vec![16], 5);
        s.count(&c.param_ids())
    };
    let (nn, sc, hy) = (
        count(CriticKind::NeuralNetwork),
        count(CriticKind::SelfCritic),
        count(CriticKind::Hybrid),
    );
    assert_eq!(sc, 0);
    assert!(sc < hy && hy < nn, "self {sc} hybrid {hy} nn {nn}");
}

fn objective_value(
    m: &VaeModel,
    c: &InferenceCritic,
    s: &ParamStore,
    x: &Tensor,
    n: &Tensor,
    part: u8,
    lambda: f64,
) -> f64 {
    let mut g = Graph::new();
    let t = m.elbo(&mut g, s, x, n).unwrap();
    let p = PairBatch::from_posterior(&g, t.posterior).unwrap();
    let cv = c.objective(&mut g, s, &p).unwrap();
    match part {
        0 => g.item(t.elbo),
        1 => g.item(cv),
        _ => {
            let o = regularized_objective(&mut g, t.elbo, Some(cv), lambda).unwrap();
            g.item(o)
        }
    }
}

#[test]
fn hybrid_trunk_moves_both_terms() {
    let (s, m, c) = setup(CriticKind::Hybrid, vec![5], 6);
    let (x, n) = batch(6, 6);
    let trunk = m.encoder.layers()[0].w;
    let fd = |part| finite_diff_grad(|p| Ok::<_, ()>(objective_value(&m, &c, p, &x, &n, part, 1.0)), &s, 1e-5).unwrap();
    let (ge, gc) = (fd(0), fd(1));
    assert!(ge.get(trunk).data().iter().any(|v| v.abs() > 1e-6));
    assert!(gc.get(trunk).data().iter().any(|v| v.abs() > 1e-6));
    // The head reads the encoder's own trunk parameters, not a copy.
    assert!(!c.param_ids().contains(&trunk));
}

#[test]
fn regularized_gradient_is_additive() {
    let lambda = 0.7;
    for kind in [CriticKind::NeuralNetwork, CriticKind::SelfCritic, CriticKind::Hybrid] {
        let (s, m, c) = setup(kind, vec![5], 7);
        let (x, n) = batch(5, 7);
        let grads = |part: u8| {
            let mut g = Graph::new();
            let t = m.elbo(&mut g, &s, &x, &n).unwrap();
            let p = PairBatch::from_posterior(&g, t.posterior).unwrap();
            let cv = c.objective(&mut g, &s, &p).unwrap();
            let root = match part {
                0 => t.elbo,
                1 => cv,
                _ => regularized_objective(&mut g, t.elbo, Some(cv), lambda).unwrap(),
            };
            g.backward(root).unwrap();
            g.param_grads(&s)
        };
        let (ge, gc, gr) = (grads(0), grads(1), grads(2));
        let fd = finite_diff_grad(|p| Ok::<_, ()>(objective_value(&m, &c, p, &x, &n, 2, lambda)), &s, 1e-5).unwrap();
        for id in m.encoder.param_ids() {
            for k in 0..s.value(id).len() {
                let sum = ge.get(id).data()[k] + lambda * gc.get(id).data()[k];
                assert!((gr.get(id).data()[k] - sum).abs() < 1e-12);
                assert!(relative_error(gr.get(id).data()[k], fd.get(id).data()[k]) < 1e-5);
            }
        }
    }
}

#[test]
fn detached_latent_stops_encoder_gradient() {
    let (s, m, mut c) = setup(CriticKind::NeuralNetwork, vec![5], 8);
    c.config.detach_latent = true;
    let (x, n) = batch(5, 8);
    let mut g = Graph::new();
    let p = m.sample_pair_batch(&mut g, &s, &x, &n).unwrap();
    let v = c.objective(&mut g, &s, &p).unwrap();
    g.backward(v).unwrap();
    let gr = g.param_grads(&s);
    assert!(gr.is_zero(&m.encoder.param_ids()));
    assert!(!gr.is_zero(&c.param_ids()));
}
