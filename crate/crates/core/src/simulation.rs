//! Synthetic trial + external-control designs and a seeded replication harness.
//!
//! Every replication draws from its own ChaCha stream `(seed, rep)`, so results
//! do not depend on scheduling or thread count.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Exp, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{mean, sample_variance, sigmoid};
use crate::methods::{estimate, Method, MethodOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Linear,
    Nonlinear,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Mechanism::Linear),
            "nonlinear" => Ok(Mechanism::Nonlinear),
            _ => Err(Error::InvalidArgument(format!("unknown mechanism '{s}'"))),
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mechanism::Linear => "linear",
            Mechanism::Nonlinear => "nonlinear",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub mechanism: Mechanism,
    pub d: usize,
    pub n_rct: usize,
    pub n_treated: usize,
    pub n_ec: usize,
    pub delta: f64,
    pub seed: u64,
    pub beta_seed: u64,
    pub sigma_rct: f64,
    pub sigma_ec: f64,
    /// Common slope of the trial-membership logit in every covariate.
    pub selection_slope: f64,
    /// Every entry of the treatment-effect vector on `(1, X)`.
    pub alpha: f64,
    /// Every entry of the shift vector `T`; `None` uses 0.05 (linear) or
    /// 0.1 (nonlinear).
    pub shift_coef: Option<f64>,
    /// Trial rows used to approximate the true effect.
    pub truth_draws: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            mechanism: Mechanism::Linear,
            d: 8,
            n_rct: 300,
            n_treated: 200,
            n_ec: 1000,
            delta: 2.0,
            seed: 1,
            beta_seed: 1,
            sigma_rct: 1.0,
            sigma_ec: 1.2,
            selection_slope: 0.3,
            alpha: 0.1,
            shift_coef: None,
            truth_draws: 100_000,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.d == 0 {
            return bad("d must be at least 1");
        }
        if self.n_treated == 0 || self.n_treated >= self.n_rct {
            return bad("need 0 < n_treated < n_rct");
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta must be nonnegative");
        }
        if !(self.sigma_rct >= 0.0 && self.sigma_ec >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        Ok(())
    }

    pub fn shift(&self) -> f64 {
        self.shift_coef.unwrap_or(match self.mechanism {
            Mechanism::Linear => 0.05,
            Mechanism::Nonlinear => 0.1,
        })
    }
}

/// I.i.d. standard normals conditioned on `[-2, 2]`, by rejection.
pub fn sample_truncated_normal<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let mut draw = || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    };
    // fill row-major so the stream order is independent of storage order
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        values.push(draw());
    }
    DMatrix::from_row_slice(n, d, &values)
}

/// Variance of a standard normal truncated to `[-2, 2]`.
pub const TRUNCATED_NORMAL_VARIANCE: f64 = 0.773_741_161_022_045_5;

/// Per-replication stream.
pub fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Intercept `a` with `mean σ(a + s·ΣX_i) = target`.
fn selection_intercept(sums: &[f64], slope: f64, target: f64) -> f64 {
    let avg = |a: f64| sums.iter().map(|s| sigmoid(a + slope * s)).sum::<f64>() / sums.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if avg(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One study: a config with its coefficient draw fixed.
#[derive(Debug, Clone)]
pub struct Study {
    pub config: DgpConfig,
    pub beta: DVector<f64>,
}

impl Study {
    pub fn new(config: DgpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.beta_seed);
        let law = match config.mechanism {
            Mechanism::Linear => Uniform::new(2.0, 3.0),
            Mechanism::Nonlinear => Uniform::new(-1.0, 1.0),
        }
        .expect("valid bounds");
        let beta = DVector::from_fn(config.d, |_, _| law.sample(&mut rng));
        Ok(Study { config, beta })
    }

    fn effect_index(&self, x: &[f64]) -> f64 {
        self.config.alpha * (1.0 + x.iter().sum::<f64>())
    }

    fn baseline(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.beta.iter().zip(x).map(|(b, v)| b * v).sum();
        match self.config.mechanism {
            Mechanism::Linear => lin,
            Mechanism::Nonlinear => lin.exp(),
        }
    }

    /// `E[Y(0) | X = x]` in the trial population.
    pub fn mu0(&self, x: &[f64]) -> f64 {
        self.baseline(x)
    }

    /// `E[Y(1) − Y(0) | X = x]`.
    pub fn cate(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.beta.iter().zip(x).map(|(b, v)| b * v).sum();
        match self.config.mechanism {
            Mechanism::Linear => self.effect_index(x),
            Mechanism::Nonlinear => lin.exp() * (self.effect_index(x).exp() - 1.0),
        }
    }

    /// `E[Y_ec | X = x] − E[Y(0) | X = x]`.
    pub fn ec_shift(&self, x: &[f64]) -> f64 {
        self.config.delta * self.config.shift() * x.iter().sum::<f64>()
    }

    /// Covariates and trial membership for one draw; trial rows come first.
    fn draw_population<R: Rng + ?Sized>(&self, rng: &mut R) -> (DMatrix<f64>, usize) {
        let c = &self.config;
        let n = c.n_rct + c.n_ec;
        let x = sample_truncated_normal(n, c.d, rng);
        let sums: Vec<f64> = (0..n).map(|i| x.row(i).sum()).collect();
        let a = selection_intercept(&sums, c.selection_slope, c.n_rct as f64 / n as f64);
        let weights: Vec<f64> = sums.iter().map(|s| sigmoid(a + c.selection_slope * s)).collect();
        let mut rct: Vec<usize> = index::sample_weighted(rng, n, |i| weights[i], c.n_rct)
            .expect("positive weights")
            .into_vec();
        rct.sort_unstable();
        let mut in_rct = vec![false; n];
        for &i in &rct {
            in_rct[i] = true;
        }
        let order: Vec<usize> = rct.iter().copied().chain((0..n).filter(|&i| !in_rct[i])).collect();
        (x.select_rows(&order), c.n_rct)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Dataset {
        let c = &self.config;
        let (x, n_rct) = self.draw_population(rng);
        let n = x.nrows();
        let mut treatment = vec![false; n];
        for i in index::sample(rng, n_rct, c.n_treated).into_iter() {
            treatment[i] = true;
        }
        let eps_rct = Normal::new(0.0, c.sigma_rct).expect("valid sd");
        let eps_ec = Normal::new(0.0, c.sigma_ec).expect("valid sd");
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            let base = self.baseline(&xi);
            let v = if i < n_rct {
                let mean = if treatment[i] { base + self.cate(&xi) } else { base };
                mean + eps_rct.sample(rng)
            } else {
                base + self.ec_shift(&xi) + eps_ec.sample(rng)
            };
            y.push(v);
        }
        let source = (0..n).map(|i| i < n_rct).collect();
        let names = (1..=c.d).map(|j| format!("x{j}")).collect();
        Dataset::with_names(x, treatment, y, source, names).expect("generated data is valid")
    }

    pub fn draw_rep(&self, rep: u64) -> Dataset {
        self.draw(&mut rep_rng(self.config.seed, rep))
    }

    /// Average effect over the trial population.
    pub fn tau_true(&self) -> TauTrue {
        let c = &self.config;
        if c.mechanism == Mechanism::Linear && c.selection_slope == 0.0 {
            return TauTrue { value: c.alpha, source: TruthSource::Analytic };
        }
        // independent of the replication streams
        let mut rng = rep_rng(c.beta_seed ^ 0x5eed_7a0e, u64::MAX);
        let mut total = 0.0;
        let mut count = 0usize;
        while count < c.truth_draws.max(1) {
            let (x, n_rct) = self.draw_population(&mut rng);
            for i in 0..n_rct {
                let xi: Vec<f64> = x.row(i).iter().copied().collect();
                total += self.cate(&xi);
            }
            count += n_rct;
        }
        TauTrue { value: total / count as f64, source: TruthSource::MonteCarlo }
    }
}

/// Draws one dataset using `config.seed` as replication 0.
pub fn generate(config: &DgpConfig) -> Result<Dataset> {
    Ok(Study::new(config.clone())?.draw_rep(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthSource {
    Analytic,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauTrue {
    pub value: f64,
    pub source: TruthSource,
}

/// One line-fit illustration: trial controls `y = 2x + N(0, 0.2²)`, ECs
/// `y = −0.9 + 2.5x + N(0, 0.5²)` with `x ~ U(0, 2)`, plus five outliers
/// `(1.6..2.0, 0.5)` appended last. A treated arm of the same size follows the
/// controls line shifted by one.
pub fn example_one<R: Rng + ?Sized>(n_control: usize, n_ec: usize, rng: &mut R) -> Dataset {
    let outliers = [1.6, 1.7, 1.8, 1.9, 2.0];
    let ux = Uniform::new(0.0, 2.0).expect("valid bounds");
    let e_rt = Normal::new(0.0, 0.2).expect("valid sd");
    let e_ec = Normal::new(0.0, 0.5).expect("valid sd");
    let mut x = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    let mut r = Vec::new();
    for arm in [false, true] {
        for _ in 0..n_control {
            let xi = ux.sample(rng);
            x.push(xi);
            a.push(arm);
            y.push(2.0 * xi + if arm { 1.0 } else { 0.0 } + e_rt.sample(rng));
            r.push(true);
        }
    }
    for _ in 0..n_ec {
        let xi = ux.sample(rng);
        x.push(xi);
        a.push(false);
        y.push(-0.9 + 2.5 * xi + e_ec.sample(rng));
        r.push(false);
    }
    for xo in outliers {
        x.push(xo);
        a.push(false);
        y.push(0.5);
        r.push(false);
    }
    let n = x.len();
    Dataset::new(DMatrix::from_column_slice(n, 1, &x), a, y, r).expect("valid example")
}

/// Calibration illustration: trial `y = 2x + N(0, 0.2²)` (treated shifted by
/// one), ECs either `−2 + 3x` (`quadratic = false`) or `x² − 2x + 2`, with
/// `N(0, 0.4²)` noise and `x ~ U(0, 2)`.
pub fn example_two<R: Rng + ?Sized>(n_control: usize, n_ec: usize, quadratic: bool, rng: &mut R) -> Dataset {
    let ux = Uniform::new(0.0, 2.0).expect("valid bounds");
    let e_rt = Normal::new(0.0, 0.2).expect("valid sd");
    let e_ec = Normal::new(0.0, 0.4).expect("valid sd");
    let mut x = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    let mut r = Vec::new();
    for arm in [false, true] {
        for _ in 0..n_control {
            let xi = ux.sample(rng);
            x.push(xi);
            a.push(arm);
            y.push(2.0 * xi + if arm { 1.0 } else { 0.0 } + e_rt.sample(rng));
            r.push(true);
        }
    }
    for _ in 0..n_ec {
        let xi = ux.sample(rng);
        let m = if quadratic { xi * xi - 2.0 * xi + 2.0 } else { -2.0 + 3.0 * xi };
        x.push(xi);
        a.push(false);
        y.push(m + e_ec.sample(rng));
        r.push(false);
    }
    let n = x.len();
    Dataset::new(DMatrix::from_column_slice(n, 1, &x), a, y, r).expect("valid example")
}

/// Two EC clusters with a common covariate law: the first `k_star` share the
/// trial control outcome law exactly, the remaining `n_shifted` carry a
/// constant outcome shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoClusterConfig {
    pub d: usize,
    pub n_control: usize,
    pub n_treated: usize,
    pub k_star: usize,
    pub n_shifted: usize,
    pub shift: f64,
    pub sigma: f64,
}

impl Default for TwoClusterConfig {
    fn default() -> Self {
        TwoClusterConfig { d: 2, n_control: 400, n_treated: 400, k_star: 300, n_shifted: 300, shift: 3.0, sigma: 1.0 }
    }
}

pub fn two_cluster<R: Rng + ?Sized>(cfg: &TwoClusterConfig, rng: &mut R) -> Dataset {
    let n_rct = cfg.n_control + cfg.n_treated;
    let n = n_rct + cfg.k_star + cfg.n_shifted;
    let x = sample_truncated_normal(n, cfg.d, rng);
    let eps = Normal::new(0.0, cfg.sigma).expect("valid sd");
    let mut a = vec![false; n];
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let base = 1.0 + x.row(i).sum();
        let v = if i < cfg.n_control {
            base
        } else if i < n_rct {
            a[i] = true;
            base + 0.5
        } else if i < n_rct + cfg.k_star {
            base
        } else {
            base + cfg.shift
        };
        y.push(v + eps.sample(rng));
    }
    let source = (0..n).map(|i| i < n_rct).collect();
    Dataset::new(x, a, y, source).expect("valid design")
}

/// Covariate names of the job-training study layout, in column order.
pub const NSW_COVARIATES: [&str; 8] = ["age", "educ", "black", "hisp", "married", "nodegree", "re74", "re75"];

/// Group-level covariate moments: (mean, sd) for age and education,
/// proportions for the four indicators, (mean, share of zeros) for the two
/// prior-earnings columns.
struct NswGroup {
    n: usize,
    treated: bool,
    rct: bool,
    age: (f64, f64),
    educ: (f64, f64),
    indicators: [f64; 4],
    earnings: [(f64, f64); 2],
    outcome_shift: f64,
}

/// Synthetic stand-in with the layout and group sizes of the NSW trial (185
/// treated, 260 controls) plus a 128-row PSID comparison group, covariate
/// moments matched to the usual group summaries. Earnings are in thousands.
pub fn nsw_psid_standin<R: Rng + ?Sized>(rng: &mut R) -> Dataset {
    let groups = [
        NswGroup {
            n: 185,
            treated: true,
            rct: true,
            age: (25.82, 7.16),
            educ: (10.35, 2.01),
            indicators: [0.84, 0.06, 0.19, 0.71],
            earnings: [(2.10, 0.71), (1.53, 0.60)],
            outcome_shift: 0.0,
        },
        NswGroup {
            n: 260,
            treated: false,
            rct: true,
            age: (25.05, 7.06),
            educ: (10.09, 1.61),
            indicators: [0.83, 0.11, 0.15, 0.83],
            earnings: [(2.11, 0.75), (1.27, 0.68)],
            outcome_shift: 0.0,
        },
        NswGroup {
            n: 128,
            treated: false,
            rct: false,
            age: (38.26, 12.89),
            educ: (10.30, 3.18),
            indicators: [0.45, 0.12, 0.70, 0.51],
            earnings: [(5.57, 0.30), (2.61, 0.40)],
            outcome_shift: -1.0,
        },
    ];
    let noise = Normal::new(0.0, 5.0).expect("valid sd");
    let (mut rows, mut a, mut y, mut r) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for g in &groups {
        let age = Normal::new(g.age.0, g.age.1).expect("valid sd");
        let educ = Normal::new(g.educ.0, g.educ.1).expect("valid sd");
        for _ in 0..g.n {
            let mut x = vec![age.sample(rng).clamp(17.0, 60.0).round(), educ.sample(rng).clamp(3.0, 18.0).round()];
            for p in g.indicators {
                x.push(if Bernoulli::new(p).expect("valid p").sample(rng) { 1.0 } else { 0.0 });
            }
            for (m, zero) in g.earnings {
                let positive = !Bernoulli::new(zero).expect("valid p").sample(rng);
                x.push(if positive { Exp::new((1.0 - zero) / m).expect("valid rate").sample(rng) } else { 0.0 });
            }
            let base = 3.0 + 0.05 * (x[0] - 25.0) + 0.3 * (x[1] - 10.0) - 0.8 * x[2] + 0.3 * x[6] + 0.4 * x[7];
            let effect = if g.treated { 1.8 } else { 0.0 };
            y.push(base + effect + g.outcome_shift + noise.sample(rng));
            rows.extend(x);
            a.push(g.treated);
            r.push(g.rct);
        }
    }
    let n = a.len();
    let names = NSW_COVARIATES.iter().map(|s| s.to_string()).collect();
    Dataset::with_names(DMatrix::from_row_slice(n, 8, &rows), a, y, r, names).expect("valid stand-in")
}

/// Summary of one method over many replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub mechanism: Mechanism,
    pub delta: f64,
    pub method: Method,
    pub est_mean: f64,
    pub bias_abs: f64,
    pub sd_empirical: f64,
    pub sd_estimated_mean: f64,
    pub mse_empirical: f64,
    pub mse_estimated_mean: f64,
    /// `bias_abs² + sd_estimated_mean²`, for comparison with
    /// tables that report the formula-based SD.
    pub mse_nominal: f64,
    pub n_ecs_modal: usize,
    pub n_reps: usize,
    pub n_failed: usize,
    pub tau_true: f64,
    pub tau_true_source: TruthSource,
}

/// Per replication, per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: u64,
    pub method: Method,
    pub tau_hat: f64,
    pub se_hat: f64,
    pub mse_hat: f64,
    pub k_borrowed: usize,
}

#[derive(Debug, Clone)]
pub struct ReplicationRun {
    pub tau_true: TauTrue,
    pub reports: Vec<ReplicationReport>,
    /// Successful replications ordered by `(rep, method order)`.
    pub records: Vec<RepRecord>,
}

impl ReplicationRun {
    pub fn records_for(&self, method: Method) -> impl Iterator<Item = &RepRecord> {
        self.records.iter().filter(move |r| r.method == method)
    }

    pub fn report_for(&self, method: Method) -> Option<&ReplicationReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

/// Most frequent value; ties go to the smallest.
pub fn mode(values: &[usize]) -> usize {
    let mut counts = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    let mut best = (0, 0);
    for (v, c) in counts {
        if c > best.1 {
            best = (v, c);
        }
    }
    best.0
}

/// Largest fraction of failed replications tolerated per method.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Runs `f` on a dedicated pool of `jobs` threads, or the global pool.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn replicate(
    config: &DgpConfig,
    methods: &[Method],
    n_reps: usize,
    opts: &MethodOptions,
    jobs: Option<usize>,
) -> Result<ReplicationRun> {
    if n_reps == 0 {
        return Err(Error::InvalidArgument("need at least one replication".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods requested".into()));
    }
    let study = Study::new(config.clone())?;
    let tau_true = study.tau_true();
    let run_rep = |rep: u64| -> Vec<Result<RepRecord>> {
        let ds = study.draw_rep(rep);
        methods
            .iter()
            .map(|&method| {
                let res = estimate(&ds, method, opts)?;
                Ok(RepRecord {
                    rep,
                    method,
                    tau_hat: res.report.tau_hat,
                    se_hat: res.report.se_hat,
                    mse_hat: res.report.mse_hat,
                    k_borrowed: res.report.k_borrowed,
                })
            })
            .collect()
    };
    let per_rep: Vec<Vec<Result<RepRecord>>> =
        with_jobs(jobs, || (0..n_reps as u64).into_par_iter().map(run_rep).collect())?;

    let mut records = Vec::new();
    let mut failures = vec![0usize; methods.len()];
    for row in per_rep {
        for (m, res) in row.into_iter().enumerate() {
            match res {
                Ok(r) => records.push(r),
                Err(_) => failures[m] += 1,
            }
        }
    }
    let mut reports = Vec::with_capacity(methods.len());
    for (m, &method) in methods.iter().enumerate() {
        if failures[m] as f64 > MAX_FAILURE_RATE * n_reps as f64 {
            return Err(Error::TooManyFailures { failed: failures[m], total: n_reps });
        }
        let recs: Vec<&RepRecord> = records.iter().filter(|r| r.method == method).collect();
        let taus: Vec<f64> = recs.iter().map(|r| r.tau_hat).collect();
        let est_mean = mean(&taus);
        let ks: Vec<usize> = recs.iter().map(|r| r.k_borrowed).collect();
        let bias_abs = (est_mean - tau_true.value).abs();
        let sd_estimated_mean = mean(&recs.iter().map(|r| r.se_hat).collect::<Vec<_>>());
        reports.push(ReplicationReport {
            mechanism: config.mechanism,
            delta: config.delta,
            method,
            est_mean,
            bias_abs,
            sd_empirical: if taus.len() > 1 { sample_variance(&taus).sqrt() } else { 0.0 },
            sd_estimated_mean,
            mse_empirical: mean(&taus.iter().map(|t| (t - tau_true.value).powi(2)).collect::<Vec<_>>()),
            mse_estimated_mean: mean(&recs.iter().map(|r| r.mse_hat).collect::<Vec<_>>()),
            mse_nominal: bias_abs * bias_abs + sd_estimated_mean * sd_estimated_mean,
            n_ecs_modal: mode(&ks),
            n_reps,
            n_failed: failures[m],
            tau_true: tau_true.value,
            tau_true_source: tau_true.source,
        });
    }
    Ok(ReplicationRun { tau_true, reports, records })
}

/// One replication study per `delta`, all other settings shared.
pub fn delta_sweep(
    config: &DgpConfig,
    deltas: &[f64],
    methods: &[Method],
    n_reps: usize,
    opts: &MethodOptions,
    jobs: Option<usize>,
) -> Result<Vec<ReplicationRun>> {
    deltas
        .iter()
        .map(|&delta| replicate(&DgpConfig { delta, ..config.clone() }, methods, n_reps, opts, jobs))
        .collect()
}

/// One CSV row per report, LF line endings.
pub fn write_reports_csv<W: Write>(reports: &[ReplicationReport], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::Io { path: "<writer>".into(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_normal_support_and_determinism() {
        let a = sample_truncated_normal(500, 3, &mut rep_rng(7, 0));
        let b = sample_truncated_normal(500, 3, &mut rep_rng(7, 0));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 2.0));
        assert_ne!(a, sample_truncated_normal(500, 3, &mut rep_rng(7, 1)));
    }

    #[test]
    fn exact_counts_and_layout() {
        let cfg = DgpConfig { n_rct: 60, n_treated: 40, n_ec: 90, d: 3, truth_draws: 1000, ..Default::default() };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.n(), 150);
        assert_eq!(ds.source().iter().filter(|&&r| r).count(), 60);
        assert_eq!(ds.treatment().iter().filter(|&&a| a).count(), 40);
        assert!(ds.source()[..60].iter().all(|&r| r));
        assert!(ds.treatment()[60..].iter().all(|&a| !a));
        assert_eq!(generate(&cfg).unwrap(), ds);
    }

    #[test]
    fn selection_intercept_hits_target() {
        let sums: Vec<f64> = (0..100).map(|i| i as f64 / 25.0 - 2.0).collect();
        let a = selection_intercept(&sums, 0.3, 0.25);
        let avg = sums.iter().map(|s| sigmoid(a + 0.3 * s)).sum::<f64>() / 100.0;
        assert!((avg - 0.25).abs() < 1e-12);
    }

    #[test]
    fn analytic_truth_without_selection() {
        let cfg = DgpConfig { selection_slope: 0.0, ..Default::default() };
        let t = Study::new(cfg).unwrap().tau_true();
        assert_eq!(t.source, TruthSource::Analytic);
        assert_eq!(t.value, 0.1);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(DgpConfig { n_treated: 300, ..Default::default() }.validate().is_err());
        assert!(DgpConfig { d: 0, ..Default::default() }.validate().is_err());
        assert!(DgpConfig { delta: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn mode_prefers_smaller_on_ties() {
        assert_eq!(mode(&[3, 5, 5, 3, 1]), 3);
        assert_eq!(mode(&[7]), 7);
    }
}
