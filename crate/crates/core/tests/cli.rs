use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn fmn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmn"))
        .args(args)
        .current_dir(dir)
        .env_remove("FMN_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const SMOKE: &str = "# smoke run\nbars.n_train = 256\nbars.n_val = 64\nbars.n_test = 64\nmax_epochs = 3\ncritic = nn\n";

#[test]
fn smoke_training_is_reproducible_and_fast() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("base.cfg"), SMOKE).unwrap();
    let t = Instant::now();
    let a = fmn(
        d.path(),
        &["train", "--config", "base.cfg", "--seed", "1", "--out", "a"],
    );
    assert!(t.elapsed().as_secs() < 180, "smoke run too slow");
    assert_eq!(code(&a), 0, "{}", text(&a));
    let b = fmn(
        d.path(),
        &["train", "--config", "base.cfg", "--seed", "1", "--out", "b"],
    );
    assert_eq!(code(&b), 0);
    let csv = |s: &str| fs::read(d.path().join(s).join("metrics.csv")).unwrap();
    assert_eq!(csv("a"), csv("b"));
    assert_eq!(String::from_utf8(csv("a")).unwrap().lines().count(), 4);
}

#[test]
fn flag_overrides_config_file() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("base.cfg"),
        SMOKE.replace("max_epochs = 3", "max_epochs = 1"),
    )
    .unwrap();
    let o = fmn(
        d.path(),
        &[
            "train",
            "--config",
            "base.cfg",
            "--out",
            "r",
            "--critic",
            "self",
            "--lambda=0.5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", text(&o));
    let m = fs::read_to_string(d.path().join("r/manifest.txt")).unwrap();
    assert!(m.contains("critic = self\n") && m.contains("lambda = 0.5\n"), "{m}");
}

#[test]
fn seed_precedence() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("c.cfg"),
        "bars.n_train = 64\nbars.n_val = 16\nbars.n_test = 0\nmax_epochs = 1\n",
    )
    .unwrap();
    let seed_of = |dir: &str| {
        let m = fs::read_to_string(d.path().join(dir).join("manifest.txt")).unwrap();
        m.lines().find(|l| l.starts_with("seed = ")).unwrap().to_string()
    };
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_fmn"));
        c.args(args).current_dir(d.path()).env_remove("FMN_SEED");
        if let Some(v) = env {
            c.env("FMN_SEED", v);
        }
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", text(&o));
    };
    run(&["train", "--config", "c.cfg", "--out", "e"], Some("7"));
    assert_eq!(seed_of("e"), "seed = 7");
    run(&["train", "--config", "c.cfg", "--out", "f", "--seed", "2"], Some("7"));
    assert_eq!(seed_of("f"), "seed = 2");
    fs::write(
        d.path().join("s.cfg"),
        "seed = 5\nbars.n_train = 64\nbars.n_val = 16\nbars.n_test = 0\nmax_epochs = 1\n",
    )
    .unwrap();
    run(&["train", "--config", "s.cfg", "--out", "g"], Some("7"));
    assert_eq!(seed_of("g"), "seed = 5");
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let o = fmn(d.path(), &["train", "--latent_dim", "3"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("latent_dim") && text(&o).contains("valid keys"));
    assert_eq!(code(&fmn(d.path(), &["frobnicate"])), 1);
    assert_eq!(code(&fmn(d.path(), &["oracle", "--joint", "cube:3"])), 1);
    assert_eq!(code(&fmn(d.path(), &["plot", "--out", "x.svg"])), 1);
    for cmd in ["gen-data", "train", "eval", "gradcheck", "oracle", "plot"] {
        let h = fmn(d.path(), &[cmd, "--help"]);
        assert_eq!(code(&h), 0, "{cmd}");
        assert!(text(&h).contains("Usage"));
    }
}

#[test]
fn io_errors_exit_three() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&fmn(d.path(), &["train", "--config", "missing.cfg"])), 3);
    assert_eq!(code(&fmn(d.path(), &["train", "--data", "missing.bin"])), 3);
    fs::write(d.path().join("junk.bin"), b"FMNDATA1\x01").unwrap();
    let o = fmn(d.path(), &["train", "--data", "junk.bin"]);
    assert_eq!(code(&o), 3);
    assert!(text(&o).contains("byte"), "{}", text(&o));
}

#[test]
fn divergence_exits_two() {
    let d = tempfile::tempdir().unwrap();
    let o = fmn(
        d.path(),
        &[
            "train",
            "--bars.n_train",
            "64",
            "--bars.n_val",
            "16",
            "--optimizer",
            "sgd",
            "--lr",
            "1e200",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&o), 2, "{}", text(&o));
}

#[test]
fn generated_data_trains_and_evaluates() {
    let d = tempfile::tempdir().unwrap();
    let g = fmn(
        d.path(),
        &[
            "gen-data",
            "--out",
            "d.bin",
            "--n-train",
            "96",
            "--n-val",
            "32",
            "--n-test",
            "32",
            "--seed",
            "3",
        ],
    );
    assert_eq!(code(&g), 0, "{}", text(&g));
    let t = fmn(
        d.path(),
        &[
            "train",
            "--data",
            "d.bin",
            "--max_epochs",
            "2",
            "--out",
            "r",
            "--critic",
            "hybrid",
        ],
    );
    assert_eq!(code(&t), 0, "{}", text(&t));
    let e = fmn(
        d.path(),
        &["eval", "--checkpoint", "r", "--split", "test", "--nll-samples", "10"],
    );
    assert_eq!(code(&e), 0, "{}", text(&e));
    let out = String::from_utf8(e.stdout).unwrap();
    assert!(out.starts_with("epoch,wall_s,elbo,nll,kl,mi_q,au,critic_c,critic_bound,lr,seed\n2,"));
    let again = fmn(
        d.path(),
        &[
            "eval",
            "--checkpoint",
            "r/checkpoint.bin",
            "--split",
            "test",
            "--nll-samples",
            "10",
        ],
    );
    assert_eq!(String::from_utf8(again.stdout).unwrap(), out);
    // Resume past the original limit.
    let r = fmn(d.path(), &["train", "--resume", "r", "--max_epochs", "3"]);
    assert_eq!(code(&r), 0, "{}", text(&r));
    assert_eq!(
        fs::read_to_string(d.path().join("r/metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    assert_eq!(code(&fmn(d.path(), &["train", "--resume", "r", "--lr", "1"])), 1);
}

#[test]
fn oracle_command_reports() {
    let d = tempfile::tempdir().unwrap();
    let o = fmn(
        d.path(),
        &[
            "oracle",
            "--joint",
            "product:4x4",
            "--replicates",
            "3",
            "--csv",
            "o.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("exact MI   0.0000"));
    let o = fmn(
        d.path(),
        &["oracle", "--joint", "diagonal:64", "--k", "8", "--replicates", "2"],
    );
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("ceiling-limited"));
    let csv = fs::read_to_string(d.path().join("o.csv")).unwrap();
    assert!(csv.starts_with("joint,exact_mi,k,steps,replicates,bound_mean,bound_se,ceiling_limited,pass\nproduct:4x4,"));
}

#[test]
fn gradcheck_command_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = fmn(d.path(), &["gradcheck", "--networks", "5"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("pass"));
}

#[test]
fn plot_structure() {
    let d = tempfile::tempdir().unwrap();
    for (dir, critic) in [("a", "none"), ("b", "self")] {
        let o = fmn(
            d.path(),
            &[
                "train",
                "--bars.n_train",
                "64",
                "--bars.n_val",
                "32",
                "--max_epochs",
                "3",
                "--critic",
                critic,
                "--out",
                dir,
            ],
        );
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    let one = fmn(d.path(), &["plot", "--trace", "a/metrics.csv", "--out", "one.svg"]);
    assert_eq!(code(&one), 0, "{}", text(&one));
    let svg = fs::read_to_string(d.path().join("one.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg.contains(">epoch</text>") && svg.contains(">nats</text>"));

    let args = [
        "plot",
        "--trace",
        "a/metrics.csv",
        "--trace",
        "b/metrics.csv",
        "--out",
        "two.svg",
    ];
    assert_eq!(code(&fmn(d.path(), &args)), 0);
    let two = fs::read(d.path().join("two.svg")).unwrap();
    let s = String::from_utf8(two.clone()).unwrap();
    assert_eq!(s.matches("<polyline").count(), 2);
    assert!(s.contains(">baseline seed=0</text>") && s.contains(">self λ=1 seed=0</text>"));
    let dashes: Vec<&str> = s
        .match_indices("stroke-dasharray=\"")
        .map(|(i, _)| &s[i..i + 24])
        .collect();
    assert_ne!(dashes[0], dashes[1]);
    assert_eq!(code(&fmn(d.path(), &args)), 0);
    assert_eq!(fs::read(d.path().join("two.svg")).unwrap(), two);

    let kl = fmn(
        d.path(),
        &[
            "plot",
            "--trace",
            "b/metrics.csv",
            "--columns",
            "mi_q,kl,critic_bound",
            "--out",
            "k.svg",
        ],
    );
    assert_eq!(code(&kl), 0);
    assert_eq!(
        fs::read_to_string(d.path().join("k.svg"))
            .unwrap()
            .matches("<polyline")
            .count(),
        3
    );

    fs::write(
        d.path().join("empty.csv"),
        "epoch,wall_s,elbo,nll,kl,mi_q,au,critic_c,critic_bound,lr,seed\n",
    )
    .unwrap();
    let e = fmn(d.path(), &["plot", "--trace", "empty.csv", "--out", "e.svg"]);
    assert_eq!(code(&e), 0);
    assert!(fs::read_to_string(d.path().join("e.svg")).unwrap().contains("no data"));

    fs::write(d.path().join("bad.csv"), "epoch,kl\n1,0.5\n").unwrap();
    let b = fmn(d.path(), &["plot", "--trace", "bad.csv", "--out", "b.svg"]);
    assert_eq!(code(&b), 1);
    assert!(text(&b).contains("`mi_q`"));
}
