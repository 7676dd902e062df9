use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fmn_core::data::{gen_bars, save_dataset, BarsSpec, Split};
use fmn_core::diagnostics::gradcheck_random_networks;
use fmn_core::metrics;
use fmn_core::oracle::{infonce_on_oracle, DiscreteJoint, OracleConfig};
use fmn_core::plot::{manifest_label, read_columns, render_svg, Series};
use fmn_core::tensor::read_checkpoint;
use fmn_core::trainer::{metrics_csv, Session, TrainConfig};
use fmn_core::{Error, Result};

/// Forget-me-not VAE training and diagnostics.
#[derive(Parser)]
#[command(name = "fmn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a bars dataset file.
    GenData(GenData),
    /// Train a VAE, optionally with an inference critic.
    Train(Train),
    /// Evaluate a checkpoint on a data split.
    Eval(Eval),
    /// Compare autodiff gradients with finite differences on random networks.
    Gradcheck(Gradcheck),
    /// Train tabular critics on a known discrete joint and check the bound.
    Oracle(Oracle),
    /// Draw metric traces as an SVG chart.
    Plot(Plot),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    n_train: usize,
    #[arg(long, default_value_t = 512)]
    n_val: usize,
    #[arg(long, default_value_t = 512)]
    n_test: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 6)]
    factors: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.9)]
    p_on: f64,
    #[arg(long, default_value_t = 0.1)]
    p_off: f64,
    /// Defaults to FMN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
}

/// Options not listed here are config keys given as `--key value`; they
/// override the config file, which overrides FMN_SEED and the defaults.
#[derive(Args)]
struct Train {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.csv, timing.csv, manifest.txt, checkpoint.bin.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the run stored in this directory. Only `--max_epochs` may be overridden.
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    resume: Option<PathBuf>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Eval {
    /// Checkpoint file, or a run directory containing checkpoint.bin.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = metrics::DEFAULT_NLL_SAMPLES)]
    nll_samples: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 100)]
    networks: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Oracle {
    /// `diagonal:<n>`, `product:<n>x<m>` or `file:<path>`.
    #[arg(long)]
    joint: String,
    #[arg(long, default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a one-row CSV summary here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Plot {
    /// metrics.csv files; repeat for overlays.
    #[arg(long, required = true)]
    trace: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated columns to draw.
    #[arg(long, default_value = "mi_q", value_delimiter = ',')]
    columns: Vec<String>,
    #[arg(long, default_value = "mutual information")]
    title: String,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 1,
        Error::NonFinite(_) | Error::NonConvergence(_) | Error::Tensor(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("FMN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("FMN_SEED `{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits `--key value` and `--key=value` pairs.
fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(Error::Config(format!(
                "unexpected argument `{a}`, expected `--key value`"
            )));
        };
        let (k, v) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("`--{key}` needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = BarsSpec {
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        h: a.height,
        w: a.width,
        n_factors: a.factors,
        noise: a.noise,
        p_on: a.p_on,
        p_off: a.p_off,
        seed: seed_or_env(a.seed)?,
    };
    let ds = gen_bars(&spec)?;
    write(&a.out, &save_dataset(&ds))?;
    println!("wrote {} images ({}x{}) to {}", ds.len(), ds.h, ds.w, a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let overrides = parse_overrides(&a.overrides)?;
    let (mut session, records, out) = if let Some(dir) = a.resume {
        let (mut s, records) = Session::resume(&dir)?;
        for (k, v) in &overrides {
            match k.as_str() {
                "max_epochs" => s.config.set(k, v)?,
                _ => {
                    return Err(Error::Config(format!(
                        "`--{k}` cannot change on resume; only --max_epochs can"
                    )))
                }
            }
        }
        let out = a.out.unwrap_or(dir);
        (s, records, out)
    } else {
        let mut c = TrainConfig::default();
        if let Some(s) = env_seed()? {
            c.seed = s;
        }
        if let Some(p) = &a.config {
            c.apply_text(&read_text(p)?)?;
        }
        if let Some(s) = a.seed {
            c.seed = s;
        }
        if let Some(o) = &a.out {
            c.out = o.display().to_string();
        }
        for (k, v) in &overrides {
            c.set(k, v)?;
        }
        let out = PathBuf::from(&c.out);
        (Session::new(c)?, Vec::new(), out)
    };
    let r = session.run_epochs(usize::MAX, Some(&out), records)?;
    match r.last() {
        Some(rec) => println!(
            "epoch {} elbo {:.4} nll {:.4} kl {:.4} mi_q {:.4} au {}{}",
            rec.epoch,
            rec.elbo,
            rec.nll,
            rec.kl,
            rec.mi_q,
            rec.au,
            rec.critic_bound
                .map(|b| format!(" critic_bound {b:.4}"))
                .unwrap_or_default()
        ),
        None => println!("nothing to do: run already finished at epoch {}", session.state.epoch),
    }
    let why = if session.state.stopped {
        "learning-rate plateau"
    } else {
        "epoch limit"
    };
    println!("stopped by {why}; outputs in {}", out.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let path = if a.checkpoint.is_dir() {
        a.checkpoint.join("checkpoint.bin")
    } else {
        a.checkpoint.clone()
    };
    let s = Session::from_checkpoint(&read_checkpoint(&read(&path)?)?)?;
    let x = s.data.fixed_binary(a.split);
    if x.rows() < 2 {
        return Err(Error::Config(format!("split `{}` has fewer than two images", a.split)));
    }
    let mut cfg = s.config.eval_config();
    cfg.nll_samples = a.nll_samples;
    cfg.seed = match a.seed {
        Some(v) => v,
        None => env_seed()?.unwrap_or(s.config.seed),
    };
    let rec = metrics::evaluate(
        &s.model,
        s.critic.as_ref(),
        s.store(),
        &x,
        &cfg,
        s.state.epoch,
        s.state.lr,
    )?;
    print!("{}", metrics_csv(&[rec]));
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let t = std::time::Instant::now();
    let r = gradcheck_random_networks(seed_or_env(a.seed)?, a.networks)?;
    println!("networks        {}", r.cases);
    println!("entries         {}", r.entries);
    println!("max rel error   {:.3e}", r.max_rel_error);
    if let Some((case, obj, name)) = &r.worst {
        println!("worst           network {case}, {obj}, {name}");
    }
    println!("seconds         {:.1}", t.elapsed().as_secs_f64());
    if r.passed(a.tol) {
        println!("pass (tolerance {:e})", a.tol);
        Ok(())
    } else {
        Err(Error::NonConvergence(format!(
            "gradient check failed: {:.3e} >= {:e}",
            r.max_rel_error, a.tol
        )))
    }
}

fn oracle(a: Oracle) -> Result<()> {
    let joint = DiscreteJoint::parse(&a.joint)?;
    let mut cfg = OracleConfig {
        k: a.k,
        replicates: a.replicates,
        seed: seed_or_env(a.seed)?,
        ..OracleConfig::default()
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let r = infonce_on_oracle(&joint, &a.joint, &cfg)?;
    print!("{}", r.text());
    if let Some(p) = &a.csv {
        write(p, r.csv().as_bytes())?;
    }
    if r.passed() {
        Ok(())
    } else {
        Err(Error::NonConvergence("bound outside the accepted range".into()))
    }
}

fn plot(a: Plot) -> Result<()> {
    let cols: Vec<&str> = a.columns.iter().map(String::as_str).collect();
    let mut series = Vec::new();
    for path in &a.trace {
        let data = read_columns(&read_text(path)?, &cols)?;
        let label = path
            .parent()
            .map(|d| d.join("manifest.txt"))
            .and_then(|m| fs::read_to_string(m).ok())
            .and_then(|m| manifest_label(&m))
            .unwrap_or_else(|| path.display().to_string());
        for (c, points) in cols.iter().zip(data) {
            let label = if cols.len() > 1 {
                format!("{label} {c}")
            } else {
                label.clone()
            };
            series.push(Series { label, points });
        }
    }
    write(&a.out, render_svg(&series, &a.title).as_bytes())?;
    println!("wrote {} series to {}", series.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Oracle(a) => oracle(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
