//! Nuisance models: outcome regressions, propensity and sampling scores.
//!
//! Outcome models are squared-loss empirical risk minimizers over a linear
//! predictor `θᵀ(1, x)`, with either an identity mean (ordinary least squares)
//! or an exponential mean (exponential regression). Each fit keeps the Hessian
//! of its mean loss, which the influence scores need.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{augment, cholesky, design, penalty_mask, sigmoid, softplus};

/// Mean function applied to the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeLink {
    #[default]
    Identity,
    Exp,
}

impl OutcomeLink {
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            OutcomeLink::Identity => eta,
            OutcomeLink::Exp => eta.exp(),
        }
    }

    /// d mean / d eta.
    pub fn slope(self, eta: f64) -> f64 {
        match self {
            OutcomeLink::Identity => 1.0,
            OutcomeLink::Exp => eta.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Ridge {
    /// `1e-6 · trace(H) / (d + 1)` of the unpenalized Hessian.
    #[default]
    Auto,
    Fixed(f64),
}

/// Fitted outcome regression `μ(x; θ) = link(θᵀ(1, x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    theta: DVector<f64>,
    hessian: DMatrix<f64>,
    ridge: f64,
    n_fit: usize,
    link: OutcomeLink,
    iterations: usize,
}

impl LinearFit {
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// Hessian of the mean penalized loss at `theta`.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn n_fit(&self) -> usize {
        self.n_fit
    }

    pub fn link(&self) -> OutcomeLink {
        self.link
    }

    pub fn d(&self) -> usize {
        self.theta.len() - 1
    }

    /// Linear predictor `θᵀ(1, x)`.
    pub fn eta(&self, x: &[f64]) -> f64 {
        self.theta[0] + x.iter().zip(self.theta.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.link.mean(self.eta(x))
    }

    pub fn predict_rows(&self, ds: &Dataset, rows: &[usize]) -> Vec<f64> {
        let x = ds.covariates();
        rows.iter()
            .map(|&i| {
                let eta = self.theta[0]
                    + (0..x.ncols()).map(|j| x[(i, j)] * self.theta[j + 1]).sum::<f64>();
                self.link.mean(eta)
            })
            .collect()
    }

    /// Stable fingerprint of the coefficients, used to tie influence rankings
    /// to the model they were computed from.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.theta.iter().chain(self.hessian.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update([self.link as u8]);
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "link": self.link,
            "theta": self.theta.as_slice(),
            "ridge": self.ridge,
            "n_fit": self.n_fit,
            "iterations": self.iterations,
        })
    }
}

fn auto_ridge(gram: &DMatrix<f64>) -> f64 {
    // gram is ZᵀZ/N; the loss Hessian is twice that
    1e-6 * 2.0 * gram.trace() / gram.nrows() as f64
}

fn resolve_ridge(ridge: Ridge, gram: &DMatrix<f64>) -> Result<f64> {
    match ridge {
        Ridge::Auto => Ok(auto_ridge(gram)),
        Ridge::Fixed(r) if r >= 0.0 && r.is_finite() => Ok(r),
        Ridge::Fixed(r) => Err(Error::InvalidArgument(format!("ridge must be nonnegative, got {r}"))),
    }
}

/// Least squares with intercept: minimizes `(1/N) Σ (y − θᵀz)² + ridge·‖θ₋₀‖²`.
pub fn fit_linear(x: &DMatrix<f64>, y: &[f64], ridge: Ridge) -> Result<LinearFit> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} outcomes", y.len())));
    }
    if n < d + 2 {
        return Err(Error::TooFewControls { n_controls: n, required: d + 2 });
    }
    let z = design(x);
    let nf = n as f64;
    let gram = z.tr_mul(&z) / nf;
    let ridge = resolve_ridge(ridge, &gram)?;
    let a = &gram + penalty_mask(d + 1) * ridge;
    let rhs = z.tr_mul(&DVector::from_column_slice(y)) / nf;
    let chol = cholesky(&a)?;
    let theta = chol.solve(&rhs);
    Ok(LinearFit { theta, hessian: a * 2.0, ridge, n_fit: n, link: OutcomeLink::Identity, iterations: 1 })
}

/// Exponential regression `E[Y|x] = exp(θᵀ(1, x))` by damped Gauss–Newton on
/// the squared loss.
pub fn fit_exponential(x: &DMatrix<f64>, y: &[f64], ridge: Ridge) -> Result<LinearFit> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} outcomes", y.len())));
    }
    if n < d + 2 {
        return Err(Error::TooFewControls { n_controls: n, required: d + 2 });
    }
    let z = design(x);
    let nf = n as f64;
    let p = d + 1;
    let mask = penalty_mask(p);
    let ridge = resolve_ridge(ridge, &(z.tr_mul(&z) / nf))?;

    // start from a log-linear fit on the positive part of y
    let floor = y.iter().map(|v| v.abs()).sum::<f64>() / nf * 1e-3 + 1e-12;
    let log_y: Vec<f64> = y.iter().map(|&v| v.max(floor).ln()).collect();
    let mut theta = fit_linear(x, &log_y, Ridge::Fixed(ridge.max(1e-10)))?.theta;

    let loss = |theta: &DVector<f64>| -> f64 {
        let eta = &z * theta;
        let sse: f64 = eta.iter().zip(y).map(|(e, yi)| (yi - e.exp()).powi(2)).sum();
        let pen: f64 = theta.iter().skip(1).map(|t| t * t).sum();
        sse / nf + ridge * pen
    };

    let mut current = loss(&theta);
    if !current.is_finite() {
        theta = DVector::zeros(p);
        theta[0] = (y.iter().sum::<f64>() / nf).max(floor).ln();
        current = loss(&theta);
    }
    let mut damping = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < 200 {
        iterations += 1;
        let eta = &z * &theta;
        let mu = eta.map(f64::exp);
        let resid = DVector::from_iterator(n, y.iter().zip(mu.iter()).map(|(yi, m)| yi - m));
        // Jacobian of the mean: rows μ_i z_i
        let mut jac = z.clone();
        for (i, m) in mu.iter().enumerate() {
            jac.row_mut(i).scale_mut(*m);
        }
        let jtj = jac.tr_mul(&jac) / nf + &mask * ridge;
        let grad = jac.tr_mul(&resid) / nf - (&mask * &theta) * ridge;
        let scale = jtj.diagonal().max().max(1e-300);
        if grad.amax() <= 1e-12 * scale.max(1.0) {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut lhs = jtj.clone();
            for k in 0..p {
                lhs[(k, k)] += damping * jtj[(k, k)].max(1e-12);
            }
            let Some(chol) = lhs.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&grad);
            let candidate = &theta + &step;
            let next = loss(&candidate);
            if next.is_finite() && next <= current {
                let rel = (current - next) / current.max(1e-300);
                theta = candidate;
                current = next;
                damping = (damping * 0.3).max(1e-12);
                accepted = true;
                if rel < 1e-14 || step.amax() < 1e-12 {
                    converged = true;
                }
                break;
            }
            damping *= 10.0;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    if !converged || !theta.iter().all(|t| t.is_finite()) {
        return Err(Error::NoConvergence { iterations });
    }

    // exact Hessian of the mean loss; Gauss–Newton if it is not positive definite
    let eta = &z * &theta;
    let mut exact = DMatrix::zeros(p, p);
    let mut gauss = DMatrix::zeros(p, p);
    for i in 0..n {
        let mu = eta[i].exp();
        let r = y[i] - mu;
        let zi = z.row(i).transpose();
        let outer = &zi * zi.transpose();
        gauss += &outer * (mu * mu);
        exact += &outer * (mu * mu - r * mu);
    }
    let exact = (exact * (2.0 / nf)) + &mask * (2.0 * ridge);
    let gauss = (gauss * (2.0 / nf)) + &mask * (2.0 * ridge);
    let hessian = if cholesky(&exact).is_ok() {
        exact
    } else {
        cholesky(&gauss)?;
        gauss
    };
    Ok(LinearFit { theta, hessian, ridge, n_fit: n, link: OutcomeLink::Exp, iterations })
}

pub fn fit_outcome(x: &DMatrix<f64>, y: &[f64], link: OutcomeLink, ridge: Ridge) -> Result<LinearFit> {
    match link {
        OutcomeLink::Identity => fit_linear(x, y, ridge),
        OutcomeLink::Exp => fit_exponential(x, y, ridge),
    }
}

pub const DEFAULT_CLIP: f64 = 0.01;
const LOGISTIC_MAX_ITER: usize = 200;

/// Logistic regression with intercept fitted by Newton–Raphson (IRLS).
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    beta: DVector<f64>,
    converged: bool,
    iterations: usize,
    clip: f64,
}

impl LogisticFit {
    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn predict_unclipped(&self, x: &[f64]) -> f64 {
        let eta = self.beta[0] + x.iter().zip(self.beta.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>();
        sigmoid(eta)
    }

    /// Probability clipped to `[clip, 1 − clip]`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_unclipped(x).clamp(self.clip, 1.0 - self.clip)
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "beta": self.beta.as_slice(),
            "converged": self.converged,
            "iterations": self.iterations,
            "clip": self.clip,
        })
    }
}

pub fn fit_logistic(features: &DMatrix<f64>, labels: &[bool], clip: f64) -> Result<LogisticFit> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", labels.len())));
    }
    if !(clip > 0.0 && clip < 0.5) {
        return Err(Error::InvalidArgument(format!("clip must lie in (0, 0.5), got {clip}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }
    let z = design(features);
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let p = d + 1;

    let neg_loglik = |beta: &DVector<f64>| -> f64 {
        let eta = &z * beta;
        eta.iter().zip(y.iter()).map(|(e, yi)| softplus(*e) - yi * e).sum()
    };

    let mut beta = DVector::zeros(p);
    let rate = positives as f64 / n as f64;
    beta[0] = (rate / (1.0 - rate)).ln();
    let mut current = neg_loglik(&beta);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;

    while iterations < LOGISTIC_MAX_ITER {
        iterations += 1;
        let eta = &z * &beta;
        let prob = eta.map(sigmoid);
        let grad = z.tr_mul(&(&y - &prob));
        if grad.norm() < 1e-9 * (n as f64).sqrt() {
            converged = true;
            break;
        }
        let mut weighted = z.clone();
        for i in 0..n {
            let w = (prob[i] * (1.0 - prob[i])).max(1e-12);
            weighted.row_mut(i).scale_mut(w);
        }
        let mut info = z.tr_mul(&weighted);
        for k in 0..p {
            info[(k, k)] += 1e-10;
        }
        let step = match info.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => match info.lu().solve(&grad) {
                Some(s) => s,
                None => break,
            },
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let candidate = &beta + &step * t;
            let next = neg_loglik(&candidate);
            if next.is_finite() && next <= current + 1e-12 * current.abs() {
                beta = candidate;
                moved = current - next > 0.0 || step.norm() * t < 1e-12;
                current = next;
                break;
            }
            t *= 0.5;
        }
        if beta.norm() > 1e4 || current < 1e-8 * n as f64 {
            separated = true;
            break;
        }
        if !moved || step.norm() * t < 1e-12 {
            let prob = (&z * &beta).map(sigmoid);
            converged = z.tr_mul(&(&y - &prob)).norm() < 1e-6;
            break;
        }
    }
    Ok(LogisticFit { beta, converged: converged && !separated, iterations, clip })
}

/// Propensity score of treatment within the trial.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensityModel {
    Known(f64),
    Fitted(LogisticFit),
}

impl PropensityModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            PropensityModel::Known(p) => *p,
            PropensityModel::Fitted(f) => f.predict(x),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            PropensityModel::Known(p) => json!({ "known": p }),
            PropensityModel::Fitted(f) => json!({ "fitted": f.to_json() }),
        }
    }
}

/// How the trial propensity score is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum E1Mode {
    /// Randomization ratio `N_t / N_R` of the data at hand.
    #[default]
    DesignRatio,
    Known(f64),
    Fitted,
}

/// Probability that a unit of the combined population comes from the trial.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingScore {
    /// Nothing borrowed: every unit is a trial unit.
    One,
    Fitted(LogisticFit),
}

impl SamplingScore {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            SamplingScore::One => 1.0,
            SamplingScore::Fitted(f) => f.predict(x),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            SamplingScore::One => json!("one"),
            SamplingScore::Fitted(f) => f.to_json(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceOptions {
    pub link: OutcomeLink,
    pub ridge: Ridge,
    pub clip: f64,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        NuisanceOptions { link: OutcomeLink::Identity, ridge: Ridge::Auto, clip: DEFAULT_CLIP }
    }
}

/// The trial-only nuisances, which do not depend on the borrowed set.
#[derive(Debug, Clone)]
pub struct RctNuisances {
    pub mu0: LinearFit,
    pub mu1: LinearFit,
    pub e1: PropensityModel,
}

pub fn fit_rct_nuisances(
    ds: &Dataset,
    split: &DataSplit,
    e1_mode: E1Mode,
    opts: &NuisanceOptions,
) -> Result<RctNuisances> {
    let x = ds.covariates();
    let y = ds.outcome();
    let fit_on = |rows: &[usize]| {
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        fit_outcome(&x.select_rows(rows), &ys, opts.link, opts.ridge)
    };
    let mu0 = fit_on(&split.rct_control_indices)?;
    let mu1 = fit_on(&split.rct_treated_indices)?;
    let e1 = match e1_mode {
        E1Mode::DesignRatio => {
            PropensityModel::Known(split.n_treated() as f64 / split.n_rct() as f64)
        }
        E1Mode::Known(p) => {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidArgument(format!("known propensity {p} outside (0, 1)")));
            }
            PropensityModel::Known(p)
        }
        E1Mode::Fitted => {
            let labels: Vec<bool> = split.rct_indices.iter().map(|&i| ds.treatment()[i]).collect();
            PropensityModel::Fitted(fit_logistic(&x.select_rows(&split.rct_indices), &labels, opts.clip)?)
        }
    };
    Ok(RctNuisances { mu0, mu1, e1 })
}

/// Every nuisance of the combined estimator for one borrowed set.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub mu0: LinearFit,
    pub mu1: LinearFit,
    /// Control outcome model on RCT controls plus borrowed ECs.
    pub m0: LinearFit,
    pub e1: PropensityModel,
    pub pi: SamplingScore,
    /// `N_R / (N_R + N_S)`.
    pub q_hat: f64,
    pub n_rct: usize,
    pub n_borrowed: usize,
}

impl NuisanceSet {
    /// Treated outcome model on the combined population; equals `mu1`
    /// because borrowed units are all controls.
    pub fn m1(&self) -> &LinearFit {
        &self.mu1
    }

    /// `e_S(x) = e₁(x)·π(x)`.
    pub fn e_s(&self, x: &[f64]) -> f64 {
        self.e1.predict(x) * self.pi.predict(x)
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "mu0": self.mu0.to_json(),
            "mu1": self.mu1.to_json(),
            "m0": self.m0.to_json(),
            "e1": self.e1.to_json(),
            "pi": self.pi.to_json(),
            "q_hat": self.q_hat,
            "n_rct": self.n_rct,
            "n_borrowed": self.n_borrowed,
        })
    }
}

/// Refits the borrowed-set dependent nuisances (`m0`, `π`) on top of fixed
/// trial-only fits.
pub fn assemble_with(
    rct: &RctNuisances,
    ds: &Dataset,
    split: &DataSplit,
    borrow_set: &[usize],
    opts: &NuisanceOptions,
) -> Result<NuisanceSet> {
    for &j in borrow_set {
        if j >= ds.n() || ds.source()[j] {
            return Err(Error::InvalidArgument(format!("borrowed row {j} is not an external control")));
        }
    }
    let n_rct = split.n_rct();
    let n_borrowed = borrow_set.len();
    let q_hat = n_rct as f64 / (n_rct + n_borrowed) as f64;
    let (m0, pi) = if borrow_set.is_empty() {
        (rct.mu0.clone(), SamplingScore::One)
    } else {
        let x = ds.covariates();
        let controls: Vec<usize> =
            split.rct_control_indices.iter().chain(borrow_set).copied().collect();
        let ys: Vec<f64> = controls.iter().map(|&i| ds.outcome()[i]).collect();
        let m0 = fit_outcome(&x.select_rows(&controls), &ys, opts.link, opts.ridge)?;
        let combined: Vec<usize> = split.rct_indices.iter().chain(borrow_set).copied().collect();
        let labels: Vec<bool> = combined.iter().map(|&i| ds.source()[i]).collect();
        let pi = fit_logistic(&x.select_rows(&combined), &labels, opts.clip)?;
        (m0, SamplingScore::Fitted(pi))
    };
    Ok(NuisanceSet {
        mu0: rct.mu0.clone(),
        mu1: rct.mu1.clone(),
        m0,
        e1: rct.e1.clone(),
        pi,
        q_hat,
        n_rct,
        n_borrowed,
    })
}

pub fn assemble_nuisances(
    ds: &Dataset,
    split: &DataSplit,
    borrow_set: &[usize],
    e1_mode: E1Mode,
    opts: &NuisanceOptions,
) -> Result<NuisanceSet> {
    let rct = fit_rct_nuisances(ds, split, e1_mode, opts)?;
    assemble_with(&rct, ds, split, borrow_set, opts)
}

/// Convenience: `(1, x)` for row `i`.
pub fn design_row(ds: &Dataset, i: usize) -> DVector<f64> {
    let x: Vec<f64> = ds.covariates().row(i).iter().copied().collect();
    augment(&x)
}
