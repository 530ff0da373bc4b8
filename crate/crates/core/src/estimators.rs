//! Trial-only AIPW and the combined trial + borrowed-EC estimator, with the
//! plug-in bias, variance and MSE estimates used to pick the borrowed set.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{mean, sample_variance};
use crate::nuisance::{LinearFit, NuisanceSet, PropensityModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub tau_hat: f64,
    pub se_hat: f64,
    /// `τ̂_S − τ̂_aipw`; zero for the trial-only estimator.
    pub bias_hat: f64,
    /// `bias_hat² + se_hat²`.
    pub mse_hat: f64,
    /// `N_R + N_S`.
    pub n_used: usize,
    pub k_borrowed: usize,
    /// Rows whose propensity or sampling score sat on a clipping bound.
    pub clipped_rows: usize,
    /// Per-row estimating-function values; `tau_hat` is their mean.
    pub phi_values: Vec<f64>,
}

impl EstimateReport {
    fn from_phi(phi: Vec<f64>, k_borrowed: usize, clipped_rows: usize) -> Self {
        let n = phi.len();
        let tau_hat = mean(&phi);
        let se_hat = (sample_variance(&phi) / n as f64).sqrt();
        EstimateReport {
            tau_hat,
            se_hat,
            bias_hat: 0.0,
            mse_hat: se_hat * se_hat,
            n_used: n,
            k_borrowed,
            clipped_rows,
            phi_values: phi,
        }
    }

    /// Records the bias estimate against the trial-only estimate.
    pub fn with_bias_against(mut self, rct_only: &EstimateReport) -> Self {
        self.bias_hat = bias_hat(&self, rct_only);
        self.mse_hat = mse_hat(&self);
        self
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.tau_hat - 1.96 * self.se_hat, self.tau_hat + 1.96 * self.se_hat)
    }

    /// `Est, SE, bias, MSE, #ECs` on one line.
    pub fn summary_line(&self) -> String {
        format!(
            "est={:.6} se={:.6} bias_hat={:.6} mse_hat={:.6} n_ecs={}",
            self.tau_hat, self.se_hat, self.bias_hat, self.mse_hat, self.k_borrowed
        )
    }
}

fn row_of(ds: &Dataset, i: usize) -> Vec<f64> {
    ds.covariates().row(i).iter().copied().collect()
}

fn on_bound(p: f64, clip: f64) -> bool {
    p <= clip || p >= 1.0 - clip
}

/// Augmented inverse-probability-weighted ATE on trial rows only.
pub fn tau_aipw(
    ds: &Dataset,
    rct_rows: &[usize],
    mu0: &LinearFit,
    mu1: &LinearFit,
    e1: &PropensityModel,
    clip: f64,
) -> Result<EstimateReport> {
    if rct_rows.is_empty() {
        return Err(Error::Empty);
    }
    if let PropensityModel::Known(p) = e1 {
        if *p < clip || *p > 1.0 - clip {
            return Err(Error::Positivity(format!("known propensity {p} outside [{clip}, {}]", 1.0 - clip)));
        }
    }
    let mut clipped = 0;
    let mut phi = Vec::with_capacity(rct_rows.len());
    for &i in rct_rows {
        if !ds.source()[i] {
            return Err(Error::InvalidArgument(format!("row {i} is not a trial row")));
        }
        let x = row_of(ds, i);
        let e = e1.predict(&x);
        if let PropensityModel::Fitted(f) = e1 {
            if on_bound(f.predict_unclipped(&x), clip) {
                clipped += 1;
            }
        }
        let (m1, m0) = (mu1.predict(&x), mu0.predict(&x));
        let y = ds.outcome()[i];
        let v = if ds.treatment()[i] {
            (y - m1) / e + m1 - m0
        } else {
            -(y - m0) / (1.0 - e) + m1 - m0
        };
        phi.push(v);
    }
    Ok(EstimateReport::from_phi(phi, 0, clipped))
}

/// Combined estimator over trial rows plus a borrowed EC set. `rows` must be
/// exactly the trial rows and borrowed rows `nu` was assembled on.
pub fn tau_combined(ds: &Dataset, rows: &[usize], nu: &NuisanceSet) -> Result<EstimateReport> {
    let n_rct = rows.iter().filter(|&&i| ds.source()[i]).count();
    if n_rct != nu.n_rct || rows.len() - n_rct != nu.n_borrowed {
        return Err(Error::InvalidArgument(format!(
            "nuisances assembled on {} trial + {} borrowed rows, estimator given {} + {}",
            nu.n_rct,
            nu.n_borrowed,
            n_rct,
            rows.len() - n_rct
        )));
    }
    let q = nu.q_hat;
    let clip_pi = match &nu.pi {
        crate::nuisance::SamplingScore::Fitted(f) => Some((f, f.clip())),
        crate::nuisance::SamplingScore::One => None,
    };
    let mut clipped = 0;
    let mut phi = Vec::with_capacity(rows.len());
    for &i in rows {
        let x = row_of(ds, i);
        let pi = nu.pi.predict(&x);
        let e_s = nu.e_s(&x);
        if !(e_s > 0.0 && e_s < 1.0) {
            return Err(Error::Positivity(format!("row {i}: e_S = {e_s}")));
        }
        let mut hit = false;
        if let Some((f, clip)) = clip_pi {
            hit |= on_bound(f.predict_unclipped(&x), clip);
        }
        if let PropensityModel::Fitted(f) = &nu.e1 {
            hit |= on_bound(f.predict_unclipped(&x), f.clip());
        }
        clipped += hit as usize;
        let r = ds.source()[i];
        let a = ds.treatment()[i];
        let y = ds.outcome()[i];
        let m1 = nu.m1().predict(&x);
        let m0 = nu.m0.predict(&x);
        let weighted = if r && a {
            (y - m1) / e_s
        } else if !a {
            -(y - m0) / (1.0 - e_s)
        } else {
            0.0
        };
        let mut v = pi / q * weighted;
        if r {
            v += (m1 - m0) / q;
        }
        phi.push(v);
    }
    Ok(EstimateReport::from_phi(phi, nu.n_borrowed, clipped))
}

pub fn bias_hat(combined: &EstimateReport, rct_only: &EstimateReport) -> f64 {
    combined.tau_hat - rct_only.tau_hat
}

pub fn mse_hat(report: &EstimateReport) -> f64 {
    report.bias_hat * report.bias_hat + report.se_hat * report.se_hat
}
