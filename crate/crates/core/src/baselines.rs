//! Reference estimators: no borrowing (NB), full borrowing (FB), full
//! calibrated borrowing (FCB) and adaptive-lasso borrowing (ALB).

use serde::Serialize;

use crate::calibration::{calibrate, fit_bias, Lambda};
use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{tau_aipw, tau_combined, EstimateReport};
use crate::linalg::{augment, cholesky};
use crate::nuisance::{assemble_with, fit_outcome, fit_rct_nuisances, E1Mode, LinearFit, NuisanceOptions, RctNuisances};

pub const ALB_DEFAULT_NU: f64 = 2.0;
pub const ALB_LAMBDA_FACTORS: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

pub fn nb(ds: &Dataset, split: &DataSplit, e1_mode: E1Mode, opts: &NuisanceOptions) -> Result<EstimateReport> {
    let rct = fit_rct_nuisances(ds, split, e1_mode, opts)?;
    nb_with(ds, split, &rct, opts)
}

fn nb_with(ds: &Dataset, split: &DataSplit, rct: &RctNuisances, opts: &NuisanceOptions) -> Result<EstimateReport> {
    tau_aipw(ds, &split.rct_indices, &rct.mu0, &rct.mu1, &rct.e1, opts.clip)
}

/// Combined estimator on the trial plus the given ECs, with bias measured
/// against the trial-only estimate.
pub fn borrow_exactly(
    ds: &Dataset,
    split: &DataSplit,
    rct: &RctNuisances,
    borrowed: &[usize],
    opts: &NuisanceOptions,
) -> Result<EstimateReport> {
    let rct_only = nb_with(ds, split, rct, opts)?;
    let nu = assemble_with(rct, ds, split, borrowed, opts)?;
    let rows: Vec<usize> = split.rct_indices.iter().chain(borrowed).copied().collect();
    Ok(tau_combined(ds, &rows, &nu)?.with_bias_against(&rct_only))
}

pub fn fb(ds: &Dataset, split: &DataSplit, e1_mode: E1Mode, opts: &NuisanceOptions) -> Result<EstimateReport> {
    let rct = fit_rct_nuisances(ds, split, e1_mode, opts)?;
    borrow_exactly(ds, split, &rct, &split.ec_indices, opts)
}

pub fn fcb(
    ds: &Dataset,
    split: &DataSplit,
    lambda: Lambda,
    e1_mode: E1Mode,
    opts: &NuisanceOptions,
) -> Result<EstimateReport> {
    if split.n_ec() == 0 {
        return fb(ds, split, e1_mode, opts);
    }
    let bias = fit_bias(ds, split, lambda, opts)?;
    let cal_ds = calibrate(ds, split, &bias).apply(ds)?;
    fb(&cal_ds, split, e1_mode, opts)
}

/// `argmin_b (b̂ − b)²/σ² + λ|b|/|b̂|^ν`, i.e. soft thresholding at
/// `λσ²/(2|b̂|^ν)`.
pub fn soft_threshold(b_hat: f64, sigma2: f64, lambda: f64, nu: f64) -> f64 {
    if b_hat == 0.0 {
        return 0.0;
    }
    let t = lambda * sigma2 / (2.0 * b_hat.abs().powf(nu));
    b_hat.signum() * (b_hat.abs() - t).max(0.0)
}

#[derive(Debug, Clone, Serialize)]
pub struct AlbFit {
    pub ec_indices: Vec<usize>,
    pub b_hat: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    pub b_tilde: Vec<f64>,
    pub lambda: f64,
    pub nu: f64,
    pub borrowed: Vec<usize>,
}

impl AlbFit {
    fn threshold(ec_indices: &[usize], b_hat: Vec<f64>, sigma_diag: Vec<f64>, lambda: f64, nu: f64) -> Self {
        let b_tilde: Vec<f64> =
            b_hat.iter().zip(&sigma_diag).map(|(&b, &s)| soft_threshold(b, s, lambda, nu)).collect();
        let borrowed = ec_indices.iter().zip(&b_tilde).filter(|(_, &b)| b == 0.0).map(|(&j, _)| j).collect();
        AlbFit { ec_indices: ec_indices.to_vec(), b_hat, sigma_diag, b_tilde, lambda, nu, borrowed }
    }
}

fn residual_variance(fit: &LinearFit, ds: &Dataset, rows: &[usize]) -> f64 {
    let pred = fit.predict_rows(ds, rows);
    let ss: f64 = rows.iter().zip(&pred).map(|(&i, p)| (ds.outcome()[i] - p).powi(2)).sum();
    ss / (rows.len() as f64 - fit.theta().len() as f64).max(1.0)
}

/// Per-row variance of `μ̂(x)` under homoscedastic noise: with the mean-loss
/// Hessian `H`, `Var θ̂ ≈ σ²·(2/n)·H⁻¹`.
fn prediction_variances(fit: &LinearFit, sigma2: f64, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
    let chol = cholesky(fit.hessian())?;
    let scale = sigma2 * 2.0 / fit.n_fit() as f64;
    Ok(rows
        .iter()
        .map(|&j| {
            let x: Vec<f64> = ds.covariates().row(j).iter().copied().collect();
            let g = augment(&x) * fit.link().slope(fit.eta(&x));
            scale * g.dot(&chol.solve(&g))
        })
        .collect())
}

/// Adaptive-lasso borrowing. `lambda_grid` defaults to
/// `{0.01, 0.1, 1, 10}·√N_E`; the λ with the smallest estimated MSE wins,
/// ties to the earlier grid entry.
pub fn alb(
    ds: &Dataset,
    split: &DataSplit,
    lambda_grid: Option<&[f64]>,
    nu: f64,
    e1_mode: E1Mode,
    opts: &NuisanceOptions,
) -> Result<(AlbFit, EstimateReport)> {
    if split.n_ec() == 0 {
        return Err(Error::InvalidArgument("adaptive-lasso borrowing needs at least one EC".into()));
    }
    let rct = fit_rct_nuisances(ds, split, e1_mode, opts)?;
    let ecs = &split.ec_indices;
    let y_ec: Vec<f64> = ecs.iter().map(|&j| ds.outcome()[j]).collect();
    let mu0_ec = fit_outcome(&ds.covariates().select_rows(ecs), &y_ec, opts.link, opts.ridge)?;

    let b_hat: Vec<f64> =
        mu0_ec.predict_rows(ds, ecs).iter().zip(rct.mu0.predict_rows(ds, ecs)).map(|(e, r)| e - r).collect();
    let var_ec = prediction_variances(&mu0_ec, residual_variance(&mu0_ec, ds, ecs), ds, ecs)?;
    let controls = &split.rct_control_indices;
    let var_rct = prediction_variances(&rct.mu0, residual_variance(&rct.mu0, ds, controls), ds, ecs)?;
    let sigma_diag: Vec<f64> = var_ec.iter().zip(&var_rct).map(|(a, b)| a + b).collect();

    let default_grid: Vec<f64>;
    let grid = match lambda_grid {
        Some(g) if !g.is_empty() => g,
        Some(_) => return Err(Error::InvalidArgument("empty lambda grid".into())),
        None => {
            let root = (split.n_ec() as f64).sqrt();
            default_grid = ALB_LAMBDA_FACTORS.iter().map(|f| f * root).collect();
            &default_grid
        }
    };
    if grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("lambda values must be nonnegative".into()));
    }

    let mut best: Option<(AlbFit, EstimateReport)> = None;
    for &lambda in grid {
        let fit = AlbFit::threshold(ecs, b_hat.clone(), sigma_diag.clone(), lambda, nu);
        let report = borrow_exactly(ds, split, &rct, &fit.borrowed, opts)?;
        if best.as_ref().is_none_or(|(_, r)| report.mse_hat < r.mse_hat) {
            best = Some((fit, report));
        }
    }
    Ok(best.expect("nonempty grid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_hand_cases() {
        assert_eq!(soft_threshold(1.0, 1.0, 4.0, 2.0), 0.0);
        assert_eq!(soft_threshold(1.5, 1.0, 0.0, 2.0), 1.5);
        // threshold 1·1/(2·4) = 0.125
        assert!((soft_threshold(-2.0, 1.0, 1.0, 2.0) + 1.875).abs() < 1e-15);
        assert_eq!(soft_threshold(0.0, 1.0, 1.0, 2.0), 0.0);
    }

    #[test]
    fn soft_threshold_minimizes_scalar_objective() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let b_hat: f64 = rng.random_range(-3.0..3.0);
            let s2: f64 = rng.random_range(0.01..2.0);
            let lambda: f64 = rng.random_range(0.0..5.0);
            let obj = |b: f64| (b_hat - b).powi(2) / s2 + lambda * b.abs() / b_hat.abs().powi(2);
            let at = obj(soft_threshold(b_hat, s2, lambda, 2.0));
            for _ in 0..1000 {
                let c: f64 = rng.random_range(-4.0..4.0);
                assert!(at <= obj(c) + 1e-12);
            }
        }
    }

    #[test]
    fn borrowed_are_exact_zeros() {
        let fit = AlbFit::threshold(&[10, 11, 12], vec![0.1, 2.0, -0.05], vec![1.0, 1.0, 1.0], 1.0, 2.0);
        assert_eq!(fit.borrowed, vec![10, 12]);
        let none = AlbFit::threshold(&[10, 11], vec![0.1, 2.0], vec![1.0, 1.0], 0.0, 2.0);
        assert!(none.borrowed.is_empty());
        assert_eq!(none.b_tilde, none.b_hat);
        let all = AlbFit::threshold(&[10, 11], vec![0.1, 2.0], vec![1.0, 1.0], 1e9, 2.0);
        assert_eq!(all.borrowed, vec![10, 11]);
    }
}
