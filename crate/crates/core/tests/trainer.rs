use std::fs;

use fmn_core::data::{Dataset, Split};
use fmn_core::distributions::standard_normal;
use fmn_core::rng::{stream, Purpose};
use fmn_core::tensor::{read_checkpoint, Tensor};
use fmn_core::trainer::{Session, TrainConfig};
use fmn_core::Error;
use rand::seq::SliceRandom;

fn small(extra: &[(&str, &str)]) -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("bars.n_train", "200"),
        ("bars.n_val", "64"),
        ("bars.n_test", "0"),
        ("hidden", "24"),
        ("d_z", "4"),
        ("max_epochs", "3"),
        ("nll_samples", "5"),
        ("eval_points", "64"),
    ]
    .iter()
    .chain(extra)
    {
        c.set(k, v).unwrap();
    }
    c
}

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Plain-arithmetic version of the per-batch loss `-(elbo + c)` for a model
/// with no hidden layers, two pixels, one latent and the self-critic.
/// `p` = [enc.w (2x2, row-major), enc.b (2), dec.w (1x2), dec.b (2)].
fn hand_loss(p: &[f64; 10], x: &[[f64; 2]], noise: &[f64]) -> f64 {
    let k = x.len();
    let mut mu = vec![0.0; k];
    let mut lv = vec![0.0; k];
    let mut z = vec![0.0; k];
    let mut elbo = 0.0;
    for i in 0..k {
        mu[i] = x[i][0] * p[0] + x[i][1] * p[2] + p[4];
        lv[i] = (x[i][0] * p[1] + x[i][1] * p[3] + p[5]).clamp(-10.0, 10.0);
        z[i] = mu[i] + (lv[i] / 2.0).exp() * noise[i];
        let mut recon = 0.0;
        for q in 0..2 {
            let l = z[i] * p[6 + q] + p[8 + q];
            recon += x[i][q] * l - (1.0 + l.exp()).ln();
        }
        let kl = 0.5 * (lv[i].exp() + mu[i] * mu[i] - 1.0 - lv[i]);
        elbo += (recon - kl) / k as f64;
    }
    let score = |i: usize, j: usize| -0.5 * LOG_2PI - 0.5 * lv[i] - (z[j] - mu[i]).powi(2) / (2.0 * lv[i].exp());
    let mut c = 0.0;
    for j in 0..k {
        let lse = (0..k).map(|i| score(i, j).exp()).sum::<f64>().ln();
        c += (score(j, j) - lse) / k as f64;
    }
    -(elbo + c)
}

fn hand_grad(p: &[f64; 10], x: &[[f64; 2]], noise: &[f64]) -> [f64; 10] {
    let eps = 1e-6;
    let mut g = [0.0; 10];
    for i in 0..10 {
        let (mut hi, mut lo) = (*p, *p);
        hi[i] += eps;
        lo[i] -= eps;
        g[i] = (hand_loss(&hi, x, noise) - hand_loss(&lo, x, noise)) / (2.0 * eps);
    }
    g
}

/// One epoch on four points with K = 2: two SGD steps, each checked
/// against the hand computation.
#[test]
fn one_epoch_matches_hand_computation() {
    let rows = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]];
    let probs = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    let ds = Dataset::new(1, 2, probs, vec![Split::Train; 4]).unwrap();
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("d_z", "1"),
        ("hidden", ""),
        ("critic", "self"),
        ("optimizer", "sgd"),
        ("lr", "0.1"),
        ("batch_size", "2"),
        ("max_epochs", "1"),
        ("seed", "3"),
    ] {
        c.set(k, v).unwrap();
    }
    let mut s = Session::with_data(c, ds).unwrap();
    let names = ["enc.0.w", "enc.0.b", "dec.0.w", "dec.0.b"];
    let read = |s: &Session| {
        let mut p = [0.0; 10];
        let mut at = 0;
        for n in names {
            for v in s.store().value(s.store().id(n).unwrap()).data() {
                p[at] = *v;
                at += 1;
            }
        }
        p
    };
    let mut p = read(&s);
    let mut order: Vec<usize> = (0..4).collect();
    order.shuffle(&mut stream(3, 1, 0, Purpose::Shuffle));
    let mut expected_loss = Vec::new();
    for (b, pair) in order.chunks(2).enumerate() {
        let x: Vec<[f64; 2]> = pair.iter().map(|&i| rows[i]).collect();
        let noise = standard_normal(&mut stream(3, 1, b as u64, Purpose::Noise), 2, 1);
        expected_loss.push(hand_loss(&p, &x, noise.data()));
        let g = hand_grad(&p, &x, noise.data());
        for i in 0..10 {
            p[i] -= 0.1 * g[i];
        }
    }
    let trace = s.train_epoch().unwrap();
    assert_eq!(trace.len(), 2);
    for (t, e) in trace.iter().zip(&expected_loss) {
        assert!((t.loss - e).abs() < 1e-10, "{} vs {e}", t.loss);
    }
    for (a, b) in read(&s).iter().zip(&p) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn trace_has_one_entry_per_batch() {
    for (n, k) in [(5usize, 2usize), (200, 32), (64, 32), (7, 7)] {
        let mut s = Session::new(small(&[
            ("bars.n_train", &n.to_string()),
            ("batch_size", &k.to_string()),
            ("critic", "nn"),
        ]))
        .unwrap();
        let t = s.train_epoch().unwrap();
        assert_eq!(t.len(), n.div_ceil(k));
        // A trailing batch of one row cannot form a negative pair.
        assert_eq!(t.last().unwrap().critic_c.is_none(), n % k == 1);
    }
}

#[test]
fn self_critic_updates_exactly_the_vae() {
    let mut s = Session::new(small(&[("critic", "self")])).unwrap();
    assert!(s.critic_param_ids().is_empty());
    let all: Vec<_> = s.store().ids().collect();
    assert_eq!(all, s.vae_param_ids());
    let before = s.store().clone();
    s.train_epoch().unwrap();
    for id in all {
        assert_ne!(before.value(id), s.store().value(id), "{} not updated", before.name(id));
        assert_eq!(s.store().step_count(id), 7);
    }
}

#[test]
fn nn_critic_parameters_are_updated() {
    let mut s = Session::new(small(&[("critic", "nn")])).unwrap();
    let before = s.store().clone();
    s.train_epoch().unwrap();
    for &id in s.critic_param_ids() {
        assert_ne!(before.value(id), s.store().value(id));
    }
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let mut s = Session::new(small(&[("critic", "hybrid"), ("seed", "4")])).unwrap();
        s.run(Some(&dir.path().join(sub))).unwrap();
    }
    let read = |s: &str| fs::read(dir.path().join(s).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let mut s = Session::new(small(&[("critic", "hybrid"), ("seed", "5")])).unwrap();
    s.run(Some(&dir.path().join("c"))).unwrap();
    assert_ne!(read("a"), read("c"));
}

/// With lambda = 0 a configured critic changes nothing the VAE sees.
#[test]
fn lambda_zero_matches_plain_vae_bitwise() {
    let mut plain = Session::new(small(&[("critic", "none")])).unwrap();
    let rp = plain.run(None).unwrap();
    for kind in ["nn", "self", "hybrid"] {
        let mut off = Session::new(small(&[("critic", kind), ("lambda", "0")])).unwrap();
        let ro = off.run(None).unwrap();
        for &id in plain.vae_param_ids() {
            let name = plain.store().name(id);
            let a = plain.store().value(id).data();
            let b = off.store().value(off.store().id(name).unwrap()).data();
            assert!(
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{kind}: {name}"
            );
        }
        let loss = |r: &fmn_core::trainer::RunResult| r.trace.iter().map(|t| t.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(loss(&rp), loss(&ro));
        for (a, b) in rp.records.iter().zip(&ro.records) {
            assert_eq!(
                (
                    a.elbo.to_bits(),
                    a.nll.to_bits(),
                    a.kl.to_bits(),
                    a.mi_q.to_bits(),
                    a.au
                ),
                (
                    b.elbo.to_bits(),
                    b.nll.to_bits(),
                    b.kl.to_bits(),
                    b.mi_q.to_bits(),
                    b.au
                )
            );
        }
    }
}

#[test]
fn resumed_run_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    let cfg = small(&[("critic", "nn"), ("max_epochs", "4")]);
    Session::new(cfg.clone()).unwrap().run(Some(&full)).unwrap();
    Session::new(cfg)
        .unwrap()
        .run_epochs(2, Some(&split), Vec::new())
        .unwrap();
    let (mut s, records) = Session::resume(&split).unwrap();
    assert_eq!(s.state.epoch, 2);
    s.run_epochs(usize::MAX, Some(&split), records).unwrap();
    assert_eq!(
        fs::read(full.join("metrics.csv")).unwrap(),
        fs::read(split.join("metrics.csv")).unwrap()
    );
    let a = read_checkpoint(&fs::read(full.join("checkpoint.bin")).unwrap()).unwrap();
    let b = read_checkpoint(&fs::read(split.join("checkpoint.bin")).unwrap()).unwrap();
    assert_eq!(a.tensors, b.tensors);
    let strip = |m: &[(String, String)]| m.iter().filter(|(k, _)| k != "config.out").cloned().collect::<Vec<_>>();
    assert_eq!(strip(&a.meta), strip(&b.meta));
}

#[test]
fn checkpoint_round_trip_restores_state() {
    let mut s = Session::new(small(&[("critic", "hybrid"), ("max_epochs", "2")])).unwrap();
    s.run(None).unwrap();
    let ck = s.checkpoint();
    let back = Session::from_checkpoint(&read_checkpoint(&fmn_core::tensor::write_checkpoint(&ck)).unwrap()).unwrap();
    assert_eq!(back.checkpoint().tensors, ck.tensors);
    assert_eq!(back.checkpoint().meta, ck.meta);
}

#[test]
fn divergence_is_reported() {
    let mut s = Session::new(small(&[("optimizer", "sgd"), ("lr", "1e200")])).unwrap();
    match s.run(None) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("batch"), "{msg}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn bad_config_names_the_key() {
    let mut c = TrainConfig::default();
    let e = c.set("latent_dim", "3").unwrap_err().to_string();
    assert!(e.contains("latent_dim") && e.contains("d_z"));
    assert!(small(&[("lr", "-1")]).validate().is_err());
}
