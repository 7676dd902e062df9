//! Exact mutual information on small discrete joints, and a tabular critic
//! trained with the contrastive loss on samples from them. Comparing the
//! trained bound with the exact value checks the bound end to end.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::critics::{infonce_loss, ScoreMatrix};
use crate::error::{Error, Result};
use crate::metrics::std_error;
use crate::rng::{stream, Purpose};
use crate::tensor::{AdamConfig, Graph, ParamStore, Tensor};

const MASS_TOLERANCE: f64 = 1e-12;

/// Joint probability table `p(i, j)`, `n` rows (observations) by `m`
/// columns (latents).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    n: usize,
    m: usize,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(n: usize, m: usize, table: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 || table.len() != n * m {
            return Err(Error::Invalid(format!(
                "joint table of length {} does not match {n}x{m}",
                table.len()
            )));
        }
        if let Some(p) = table.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::Invalid(format!(
                "joint entry {p} is not a finite non-negative number"
            )));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Invalid(format!("joint mass is {total}, expected 1")));
        }
        Ok(Self { n, m, table })
    }

    /// `p(i, i) = 1/n`.
    pub fn diagonal(n: usize) -> Result<Self> {
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            t[i * n + i] = 1.0 / n as f64;
        }
        Self::new(n, n, t)
    }

    /// Uniform product of independent marginals.
    pub fn product(n: usize, m: usize) -> Result<Self> {
        Self::new(n, m, vec![1.0 / (n * m) as f64; n * m])
    }

    /// Outer product of two marginals.
    pub fn outer(px: &[f64], pz: &[f64]) -> Result<Self> {
        let t = px.iter().flat_map(|a| pz.iter().map(move |b| a * b)).collect();
        Self::new(px.len(), pz.len(), t)
    }

    /// Mass `diag_mass / n` on each diagonal cell, the rest spread evenly
    /// over the off-diagonal cells.
    pub fn noisy_diagonal(n: usize, diag_mass: f64) -> Result<Self> {
        if n < 2 || !(0.0..=1.0).contains(&diag_mass) {
            return Err(Error::Invalid("noisy diagonal needs n >= 2 and mass in [0, 1]".into()));
        }
        let off = (1.0 - diag_mass) / (n * (n - 1)) as f64;
        let mut t = vec![off; n * n];
        for i in 0..n {
            t[i * n + i] = diag_mass / n as f64;
        }
        Self::new(n, n, t)
    }

    /// Parses `diagonal:<n>`, `product:<n>x<m>` or `file:<path>`.
    pub fn parse(spec: &str) -> Result<Self> {
        let grammar = || {
            Error::Config(format!(
                "bad joint `{spec}`; expected diagonal:<n> | product:<n>x<m> | file:<path>"
            ))
        };
        let (kind, arg) = spec.split_once(':').ok_or_else(grammar)?;
        let pos = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(grammar);
        match kind {
            "diagonal" => Self::diagonal(pos(arg)?),
            "product" => {
                let (a, b) = arg.split_once('x').ok_or_else(grammar)?;
                Self::product(pos(a)?, pos(b)?)
            }
            "file" => Self::load(Path::new(arg)),
            _ => Err(grammar()),
        }
    }

    /// Reads a table of comma- or whitespace-separated rows.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad joint entry `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let m = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Config("joint rows have different lengths".into()));
        }
        Self::new(rows.len(), m, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.table[i * self.m + j]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.n).map(|i| (0..self.m).map(|j| self.p(i, j)).sum()).collect()
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        (0..self.m).map(|j| (0..self.n).map(|i| self.p(i, j)).sum()).collect()
    }

    /// `K` joint draws `(x_k, z_k)`.
    pub fn sample_pairs<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let dist = WeightedIndex::new(&self.table).expect("valid joint");
        (0..k)
            .map(|_| {
                let c = dist.sample(rng);
                (c / self.m, c % self.m)
            })
            .collect()
    }
}

/// `sum p(i,j) log(p(i,j) / (p(i) p(j)))` with `0 log 0 = 0`.
pub fn exact_mi(joint: &DiscreteJoint) -> f64 {
    let (px, pz) = (joint.marginal_x(), joint.marginal_z());
    let mut mi = 0.0;
    for i in 0..joint.n {
        for j in 0..joint.m {
            let p = joint.p(i, j);
            if p > 0.0 {
                mi += p * (p / (px[i] * pz[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// `r(i, j) = p(i, j) / (p(i) p(j))`, an `n x m` tensor.
pub fn exact_density_ratio(joint: &DiscreteJoint) -> Result<Tensor> {
    let (px, pz) = (joint.marginal_x(), joint.marginal_z());
    if px.iter().chain(&pz).any(|&p| p <= 0.0) {
        return Err(Error::Invalid("density ratio needs strictly positive marginals".into()));
    }
    let data = (0..joint.n)
        .flat_map(|i| (0..joint.m).map(move |j| (i, j)))
        .map(|(i, j)| joint.p(i, j) / (px[i] * pz[j]))
        .collect();
    Ok(Tensor::matrix(joint.n, joint.m, data))
}

fn one_hot(idx: impl Iterator<Item = usize>, width: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = idx
        .map(|i| {
            let mut r = vec![0.0; width];
            r[i] = 1.0;
            r
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Contrastive objective `c` of a tabular critic on one batch of pairs.
/// `scores` is `n x m`; batch entry `(a, b)` scores `(x_a, z_b)`.
pub fn tabular_objective(scores: &Tensor, pairs: &[(usize, usize)]) -> Result<f64> {
    let (n, m) = scores.dims2()?;
    let k = pairs.len();
    let mut s = Vec::with_capacity(k * k);
    for &(xa, _) in pairs {
        for &(_, zb) in pairs {
            s.push(scores.data()[xa * m + zb]);
        }
    }
    debug_assert!(pairs.iter().all(|&(x, z)| x < n && z < m));
    let mut g = Graph::new();
    let v = g.constant(&Tensor::matrix(k, k, s))?;
    let sm = ScoreMatrix::new(&g, v)?;
    let c = infonce_loss(&mut g, &sm)?;
    Ok(g.item(c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub k: usize,
    pub steps: usize,
    pub lr: f64,
    pub eval_batches: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            k: 32,
            steps: 1500,
            lr: 0.05,
            eval_batches: 200,
            replicates: 10,
            seed: 0,
        }
    }
}

/// One trained critic.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    /// Mean of `c + log K` over fresh evaluation batches.
    pub bound: f64,
    /// Sample variance of the per-batch bound.
    pub batch_variance: f64,
    pub scores: Tensor,
}

/// Trains an `n x m` score table with Adam on fresh `K`-batches, the lr
/// decaying linearly to zero, then measures the bound on fresh batches.
pub fn train_tabular(joint: &DiscreteJoint, cfg: &OracleConfig, replicate: u64) -> Result<OracleRun> {
    let k = cfg.k;
    if k < 2 {
        return Err(Error::Invalid(format!("oracle needs K >= 2, got {k}")));
    }
    let (n, m) = (joint.n, joint.m);
    let mut store = ParamStore::new();
    let t = store.add("table", Tensor::zeros(&[n, m]))?;
    let ids = [t];
    let window = (cfg.steps / 10).max(1);
    let (mut early, mut late) = (0.0, 0.0);
    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, replicate, step as u64, Purpose::Oracle);
        let pairs = joint.sample_pairs(k, &mut rng);
        let a = one_hot(pairs.iter().map(|p| p.0), n);
        let b = one_hot(pairs.iter().map(|p| p.1), m);
        let mut g = Graph::new();
        let av = g.constant(&a)?;
        let bv = g.constant(&b)?;
        let tv = g.param(&store, t);
        let at = g.matmul(av, tv)?;
        let bt = g.transpose(bv);
        let s = g.matmul(at, bt)?;
        let sm = ScoreMatrix::new(&g, s)?;
        let c = infonce_loss(&mut g, &sm)?;
        let cv = g.item(c);
        if !cv.is_finite() {
            return Err(Error::NonConvergence(format!("oracle loss became {cv} at step {step}")));
        }
        if step < window {
            early += cv;
        }
        if step >= cfg.steps - window {
            late += cv;
        }
        let loss = g.neg(c);
        g.backward(loss)?;
        let grads = g.param_grads(&store);
        let frac = 1.0 - step as f64 / cfg.steps as f64;
        store.adam_step(
            &ids,
            &grads,
            AdamConfig {
                lr: cfg.lr * frac,
                ..AdamConfig::default()
            },
        )?;
    }
    let (early, late) = (early / window as f64, late / window as f64);
    if cfg.steps >= 2 * window && late < early - 0.1 {
        return Err(Error::NonConvergence(format!(
            "oracle objective fell from {early:.4} to {late:.4} during training"
        )));
    }
    let scores = store.value(t).clone();
    let bounds = eval_table(joint, &scores, k, cfg.eval_batches, cfg.seed, replicate)?;
    Ok(OracleRun {
        bound: bounds.iter().sum::<f64>() / bounds.len() as f64,
        batch_variance: sample_variance(&bounds),
        scores,
    })
}

/// Per-batch bounds `c + log K` of a fixed score table on fresh batches.
pub fn eval_table(
    joint: &DiscreteJoint,
    scores: &Tensor,
    k: usize,
    batches: usize,
    seed: u64,
    replicate: u64,
) -> Result<Vec<f64>> {
    let log_k = (k as f64).ln();
    (0..batches.max(1))
        .map(|b| {
            let mut rng = stream(seed ^ 0x5eed_e7a1, replicate, b as u64, Purpose::Oracle);
            let pairs = joint.sample_pairs(k, &mut rng);
            Ok(tabular_objective(scores, &pairs)? + log_k)
        })
        .collect()
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mu = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub joint: String,
    pub exact_mi: f64,
    pub k: usize,
    pub steps: usize,
    pub bounds: Vec<f64>,
    pub batch_variances: Vec<f64>,
    pub mean: f64,
    pub se: f64,
}

/// Acceptable distance below `min(MI, log K)` for a converged tabular critic.
pub const LOWER_SLACK: f64 = 0.2;

impl OracleReport {
    /// `min(exact MI, log K)`.
    pub fn target(&self) -> f64 {
        self.exact_mi.min((self.k as f64).ln())
    }

    /// The true MI exceeds what a `K`-sample bound can show.
    pub fn ceiling_limited(&self) -> bool {
        self.exact_mi > (self.k as f64).ln()
    }

    pub fn upper_ok(&self) -> bool {
        self.mean <= self.target() + 3.0 * self.se
    }

    pub fn lower_ok(&self) -> bool {
        self.mean >= self.target() - LOWER_SLACK
    }

    pub fn passed(&self) -> bool {
        self.upper_ok() && self.lower_ok()
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "joint      {}", self.joint).unwrap();
        writeln!(s, "exact MI   {:.4}", self.exact_mi).unwrap();
        writeln!(s, "K          {}  (log K = {:.4})", self.k, (self.k as f64).ln()).unwrap();
        writeln!(s, "steps      {}", self.steps).unwrap();
        writeln!(
            s,
            "bound      {:.4} +/- {:.4}  ({} replicates)",
            self.mean,
            self.se,
            self.bounds.len()
        )
        .unwrap();
        if self.ceiling_limited() {
            writeln!(s, "note       ceiling-limited: exact MI exceeds log K").unwrap();
        }
        writeln!(
            s,
            "upper      {}  (bound <= {:.4} + 3 SE)",
            if self.upper_ok() { "pass" } else { "FAIL" },
            self.target()
        )
        .unwrap();
        writeln!(
            s,
            "lower      {}  (bound >= {:.4} - {LOWER_SLACK})",
            if self.lower_ok() { "pass" } else { "FAIL" },
            self.target()
        )
        .unwrap();
        s
    }

    pub fn csv(&self) -> String {
        format!(
            "joint,exact_mi,k,steps,replicates,bound_mean,bound_se,ceiling_limited,pass\n{},{:.10},{},{},{},{:.10},{:.10},{},{}\n",
            self.joint,
            self.exact_mi,
            self.k,
            self.steps,
            self.bounds.len(),
            self.mean,
            self.se,
            self.ceiling_limited(),
            self.passed()
        )
    }
}

/// Trains `cfg.replicates` independent tabular critics and summarizes the
/// bound against the exact mutual information.
pub fn infonce_on_oracle(joint: &DiscreteJoint, label: &str, cfg: &OracleConfig) -> Result<OracleReport> {
    if cfg.replicates == 0 {
        return Err(Error::Invalid("at least one replicate required".into()));
    }
    let mut bounds = Vec::with_capacity(cfg.replicates);
    let mut vars = Vec::with_capacity(cfg.replicates);
    for r in 0..cfg.replicates {
        let run = train_tabular(joint, cfg, r as u64)?;
        bounds.push(run.bound);
        vars.push(run.batch_variance);
    }
    let mean = bounds.iter().sum::<f64>() / bounds.len() as f64;
    let se = if bounds.len() > 1 { std_error(&bounds) } else { 0.0 };
    Ok(OracleReport {
        joint: label.to_string(),
        exact_mi: exact_mi(joint),
        k: cfg.k,
        steps: cfg.steps,
        bounds,
        batch_variances: vars,
        mean,
        se,
    })
}
