//! Outcome calibration of external controls.
//!
//! Among all controls, `Y − m(X) = (π₀(X) − R)·b(X) + ε`, where `m` is the
//! pooled control outcome model and `π₀` the probability that a control comes
//! from the trial. Regressing the outcome residual on the sampling residual
//! recovers the bias function `b`, which is then subtracted from every EC
//! outcome before the usual influence-based borrowing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::borrowing::{scan_with, BorrowResult, KGrid, ScanOptions};
use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::influence::{rank_and_nest, InfluenceRanking};
use crate::linalg::{augment, cholesky, design, penalty_mask};
use crate::nuisance::{fit_logistic, fit_outcome, fit_rct_nuisances, LinearFit, LogisticFit, NuisanceOptions};

/// Ridge weight on the non-intercept coefficients of `b`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Lambda {
    Fixed(f64),
    /// 5-fold cross-validation over `{0, 1e-3, 1e-2, 1e-1}·n_controls`.
    #[default]
    CrossValidated,
}

pub const CV_LAMBDA_FACTORS: [f64; 4] = [0.0, 1e-3, 1e-2, 1e-1];
const CV_FOLDS: usize = 5;

#[derive(Debug, Clone)]
pub struct BiasFit {
    /// Coefficients of `b(x) = θᵀ(1, x)`.
    pub theta_b: DVector<f64>,
    pub lambda: f64,
    /// Pooled control outcome model `m(x)`.
    pub m_all: LinearFit,
    /// Trial membership among controls `π₀(x)`.
    pub pi0: LogisticFit,
}

impl BiasFit {
    pub fn bias_at(&self, x: &[f64]) -> f64 {
        self.theta_b.dot(&augment(x))
    }
}

/// Solves `min Σ (U_i − θᵀ(1, X_i)·V_i)² + λ‖θ₋₀‖²` in closed form.
pub fn solve_bias(x: &DMatrix<f64>, u: &[f64], v: &[f64], lambda: f64) -> Result<DVector<f64>> {
    let n = x.nrows();
    if u.len() != n || v.len() != n {
        return Err(Error::Shape(format!("{n} rows, {} U values, {} V values", u.len(), v.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be nonnegative, got {lambda}")));
    }
    if v.iter().all(|vi| vi.abs() < 1e-8) {
        return Err(Error::Unidentifiable);
    }
    let mut w = design(x);
    for (i, vi) in v.iter().enumerate() {
        w.row_mut(i).scale_mut(*vi);
    }
    let p = w.ncols();
    let lhs = w.tr_mul(&w) + penalty_mask(p) * lambda;
    let rhs = w.tr_mul(&DVector::from_column_slice(u));
    let chol = cholesky(&lhs).map_err(|_| Error::Unidentifiable)?;
    Ok(chol.solve(&rhs))
}

fn cv_loss(x: &DMatrix<f64>, u: &[f64], v: &[f64], lambda: f64) -> Result<f64> {
    let n = x.nrows();
    let mut total = 0.0;
    for fold in 0..CV_FOLDS {
        let train: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS != fold).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % CV_FOLDS == fold).collect();
        let pick = |idx: &[usize], s: &[f64]| idx.iter().map(|&i| s[i]).collect::<Vec<f64>>();
        let theta = solve_bias(&x.select_rows(&train), &pick(&train, u), &pick(&train, v), lambda)?;
        for &i in &test {
            let xi: Vec<f64> = x.row(i).iter().copied().collect();
            total += (u[i] - theta.dot(&augment(&xi)) * v[i]).powi(2);
        }
    }
    Ok(total)
}

/// Picks λ by cross-validated residual sum of squares; ties keep the smaller λ.
pub fn select_lambda(x: &DMatrix<f64>, u: &[f64], v: &[f64]) -> Result<f64> {
    let n = x.nrows() as f64;
    let mut best: Option<(f64, f64)> = None;
    for factor in CV_LAMBDA_FACTORS {
        let lambda = factor * n;
        let Ok(loss) = cv_loss(x, u, v, lambda) else { continue };
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((lambda, loss));
        }
    }
    best.map(|(l, _)| l).ok_or(Error::Unidentifiable)
}

/// Bias coefficients from externally supplied nuisances, evaluated on control
/// rows `x` with outcomes `y` and trial flags `r`.
pub fn bias_from_nuisances(
    x: &DMatrix<f64>,
    y: &[f64],
    r: &[bool],
    m: impl Fn(&[f64]) -> f64,
    pi0: impl Fn(&[f64]) -> f64,
    lambda: f64,
) -> Result<DVector<f64>> {
    if y.len() != x.nrows() || r.len() != x.nrows() {
        return Err(Error::Shape(format!("{} rows, {} outcomes, {} flags", x.nrows(), y.len(), r.len())));
    }
    let mut u = Vec::with_capacity(y.len());
    let mut v = Vec::with_capacity(y.len());
    for i in 0..x.nrows() {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        u.push(y[i] - m(&xi));
        v.push(pi0(&xi) - if r[i] { 1.0 } else { 0.0 });
    }
    solve_bias(x, &u, &v, lambda)
}

/// All control rows, trial controls first.
fn control_rows(split: &DataSplit) -> Vec<usize> {
    split.rct_control_indices.iter().chain(&split.ec_indices).copied().collect()
}

pub fn fit_bias(ds: &Dataset, split: &DataSplit, lambda: Lambda, opts: &NuisanceOptions) -> Result<BiasFit> {
    if split.n_control() == 0 || split.n_ec() == 0 {
        return Err(Error::InvalidArgument("bias estimation needs both trial controls and ECs".into()));
    }
    let rows = control_rows(split);
    let x = ds.covariates().select_rows(&rows);
    let y: Vec<f64> = rows.iter().map(|&i| ds.outcome()[i]).collect();
    let r: Vec<bool> = rows.iter().map(|&i| ds.source()[i]).collect();

    let m_all = fit_outcome(&x, &y, opts.link, opts.ridge)?;
    let pi0 = fit_logistic(&x, &r, opts.clip)?;
    let mut u = Vec::with_capacity(rows.len());
    let mut v = Vec::with_capacity(rows.len());
    for (k, _) in rows.iter().enumerate() {
        let xi: Vec<f64> = x.row(k).iter().copied().collect();
        u.push(y[k] - m_all.predict(&xi));
        v.push(pi0.predict(&xi) - if r[k] { 1.0 } else { 0.0 });
    }
    let lambda = match lambda {
        Lambda::Fixed(l) => l,
        Lambda::CrossValidated => select_lambda(&x, &u, &v)?,
    };
    let theta_b = solve_bias(&x, &u, &v, lambda)?;
    Ok(BiasFit { theta_b, lambda, m_all, pi0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibratedEcs {
    pub ec_indices: Vec<usize>,
    pub y_tilde: Vec<f64>,
    pub bias_at_ec: Vec<f64>,
}

impl CalibratedEcs {
    /// Copy of `ds` with EC outcomes replaced by their calibrated values.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        ds.with_outcomes(&self.ec_indices, &self.y_tilde)
    }

    /// `ec_index,y,b_hat,y_tilde` rows.
    pub fn write_csv<W: std::io::Write>(&self, ds: &Dataset, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["ec_index", "y", "b_hat", "y_tilde"])?;
        for (k, &j) in self.ec_indices.iter().enumerate() {
            w.write_record([
                j.to_string(),
                ds.outcome()[j].to_string(),
                self.bias_at_ec[k].to_string(),
                self.y_tilde[k].to_string(),
            ])?;
        }
        w.flush().map_err(|source| Error::Io { path: "<writer>".into(), source })?;
        Ok(())
    }
}

pub fn calibrate_with(ds: &Dataset, split: &DataSplit, theta_b: &DVector<f64>) -> CalibratedEcs {
    let mut bias_at_ec = Vec::with_capacity(split.n_ec());
    let mut y_tilde = Vec::with_capacity(split.n_ec());
    for &j in &split.ec_indices {
        let xj: Vec<f64> = ds.covariates().row(j).iter().copied().collect();
        let b = theta_b.dot(&augment(&xj));
        bias_at_ec.push(b);
        y_tilde.push(ds.outcome()[j] - b);
    }
    CalibratedEcs { ec_indices: split.ec_indices.clone(), y_tilde, bias_at_ec }
}

pub fn calibrate(ds: &Dataset, split: &DataSplit, fit: &BiasFit) -> CalibratedEcs {
    calibrate_with(ds, split, &fit.theta_b)
}

/// Euclidean distances from the ideal EC outcomes `μ̂₀(X_j)` to the calibrated
/// and to the original EC outcomes, in that order.
pub fn calibration_distance(ds: &Dataset, mu0: &LinearFit, cal: &CalibratedEcs) -> (f64, f64) {
    let ideal = mu0.predict_rows(ds, &cal.ec_indices);
    let d_tilde = ideal.iter().zip(&cal.y_tilde).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let d_orig = ideal
        .iter()
        .zip(&cal.ec_indices)
        .map(|(a, &j)| (a - ds.outcome()[j]).powi(2))
        .sum::<f64>()
        .sqrt();
    (d_tilde, d_orig)
}

#[derive(Debug, Clone)]
pub struct AcibOutcome {
    pub bias: BiasFit,
    pub calibrated: CalibratedEcs,
    pub ranking: InfluenceRanking,
    pub result: BorrowResult,
}

/// Calibrate every EC, re-rank on calibrated outcomes, then scan.
pub fn acib(
    ds: &Dataset,
    split: &DataSplit,
    lambda: Lambda,
    grid: &KGrid,
    opts: &ScanOptions,
) -> Result<AcibOutcome> {
    let bias = fit_bias(ds, split, lambda, &opts.nuisance)?;
    let calibrated = calibrate(ds, split, &bias);
    let cal_ds = calibrated.apply(ds)?;
    // trial rows are untouched, so the trial-only fits are refit on identical data
    let rct = fit_rct_nuisances(&cal_ds, split, opts.e1_mode, &opts.nuisance)?;
    let ranking = rank_and_nest(&rct.mu0, &cal_ds, &split.rct_control_indices, &split.ec_indices)?;
    let mut result = scan_with(&cal_ds, split, &rct, &ranking, grid, opts)?;
    result.calibrated = true;
    Ok(AcibOutcome { bias, calibrated, ranking, result })
}
