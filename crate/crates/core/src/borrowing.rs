//! Adaptive influence-based borrowing: scan the nested EC prefixes over a grid
//! of sizes, estimate the MSE of the combined estimator at each, and keep the
//! size that minimizes it.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{tau_aipw, tau_combined, EstimateReport};
use crate::influence::InfluenceRanking;
use crate::nuisance::{assemble_with, fit_rct_nuisances, E1Mode, NuisanceOptions, RctNuisances};

/// Candidate numbers of borrowed ECs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KGrid {
    points: Vec<usize>,
}

impl KGrid {
    /// `0, step, 2·step, …` capped by and always including `n_ec`.
    pub fn with_step(n_ec: usize, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::InvalidArgument("grid step must be positive".into()));
        }
        let mut points: Vec<usize> = (0..=n_ec).step_by(step).collect();
        if *points.last().unwrap() != n_ec {
            points.push(n_ec);
        }
        Ok(KGrid { points })
    }

    /// Step `max(1, n_ec / 20)`, about twenty refits per scan.
    pub fn default_for(n_ec: usize) -> Self {
        Self::with_step(n_ec, (n_ec / 20).max(1)).expect("positive step")
    }

    /// Explicit points: strictly increasing, starting at 0, none above `n_ec`.
    pub fn from_points(points: Vec<usize>, n_ec: usize) -> Result<Self> {
        if points.first() != Some(&0) {
            return Err(Error::InvalidArgument("grid must start at 0".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("grid must be strictly increasing".into()));
        }
        if points.iter().any(|&k| k > n_ec) {
            return Err(Error::InvalidArgument(format!("grid point exceeds the {n_ec} available ECs")));
        }
        Ok(KGrid { points })
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn step(&self) -> usize {
        self.points.get(1).map_or(0, |k| k - self.points[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct ScanOptions {
    pub nuisance: NuisanceOptions,
    pub e1_mode: E1Mode,
    /// Smooth the MSE curve with a centered 3-point moving average before
    /// taking the argmin. The reported curves stay raw.
    pub smooth: bool,
    pub parallel: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { nuisance: NuisanceOptions::default(), e1_mode: E1Mode::DesignRatio, smooth: false, parallel: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BorrowResult {
    pub grid: KGrid,
    pub tau_curve: Vec<f64>,
    pub mse_curve: Vec<f64>,
    pub bias_curve: Vec<f64>,
    pub se_curve: Vec<f64>,
    pub k_hat: usize,
    /// Length-`k_hat` prefix of the ranking.
    pub borrowed_indices: Vec<usize>,
    pub final_report: EstimateReport,
    pub rct_only: EstimateReport,
    /// True when EC outcomes were calibrated before ranking.
    pub calibrated: bool,
}

impl BorrowResult {
    /// `k,mse_hat,bias_hat,se_hat` rows.
    pub fn write_curve_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["k", "mse_hat", "bias_hat", "se_hat"])?;
        for (i, k) in self.grid.points().iter().enumerate() {
            w.write_record([
                k.to_string(),
                self.mse_curve[i].to_string(),
                self.bias_curve[i].to_string(),
                self.se_curve[i].to_string(),
            ])?;
        }
        w.flush().map_err(|source| Error::Io { path: "<writer>".into(), source })?;
        Ok(())
    }
}

pub fn mse_curve_export(result: &BorrowResult) -> Result<String> {
    let mut buf = Vec::new();
    result.write_curve_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Centered moving average; end points average over the available neighbours.
pub fn smooth3(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(v.len() - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// First index of the minimum, so ties go to the smaller k.
pub fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

pub fn scan(
    ds: &Dataset,
    split: &DataSplit,
    ranking: &InfluenceRanking,
    grid: &KGrid,
    opts: &ScanOptions,
) -> Result<BorrowResult> {
    let rct = fit_rct_nuisances(ds, split, opts.e1_mode, &opts.nuisance)?;
    scan_with(ds, split, &rct, ranking, grid, opts)
}

/// Scan with trial-only nuisances already fitted.
pub fn scan_with(
    ds: &Dataset,
    split: &DataSplit,
    rct: &RctNuisances,
    ranking: &InfluenceRanking,
    grid: &KGrid,
    opts: &ScanOptions,
) -> Result<BorrowResult> {
    if let Some(&k) = grid.points().last() {
        if k > ranking.len() {
            return Err(Error::InvalidArgument(format!("grid point {k} exceeds ranking of {}", ranking.len())));
        }
    }
    let rct_only = tau_aipw(ds, &split.rct_indices, &rct.mu0, &rct.mu1, &rct.e1, opts.nuisance.clip)?;

    let eval = |k: usize| -> Result<EstimateReport> {
        let borrowed = ranking.prefix(k);
        let nu = assemble_with(rct, ds, split, borrowed, &opts.nuisance)?;
        let rows: Vec<usize> = split.rct_indices.iter().chain(borrowed).copied().collect();
        Ok(tau_combined(ds, &rows, &nu)?.with_bias_against(&rct_only))
    };
    let results: Vec<Result<EstimateReport>> = if opts.parallel {
        grid.points().par_iter().map(|&k| eval(k)).collect()
    } else {
        grid.points().iter().map(|&k| eval(k)).collect()
    };
    let mut reports = Vec::with_capacity(results.len());
    for (res, &k) in results.into_iter().zip(grid.points()) {
        reports.push(res.map_err(|e| Error::AtGridPoint { k, source: Box::new(e) })?);
    }

    let mse_curve: Vec<f64> = reports.iter().map(|r| r.mse_hat).collect();
    let decision = if opts.smooth { smooth3(&mse_curve) } else { mse_curve.clone() };
    let best = argmin_first(&decision);
    let k_hat = grid.points()[best];
    Ok(BorrowResult {
        grid: grid.clone(),
        tau_curve: reports.iter().map(|r| r.tau_hat).collect(),
        bias_curve: reports.iter().map(|r| r.bias_hat).collect(),
        se_curve: reports.iter().map(|r| r.se_hat).collect(),
        mse_curve,
        k_hat,
        borrowed_indices: ranking.prefix(k_hat).to_vec(),
        final_report: reports.swap_remove(best),
        rct_only,
        calibrated: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_construction() {
        let g = KGrid::with_step(1000, 50).unwrap();
        assert_eq!(g.points().len(), 21);
        assert_eq!(g.points()[20], 1000);
        assert_eq!(KGrid::default_for(1000), g);
        let g = KGrid::with_step(7, 3).unwrap();
        assert_eq!(g.points(), &[0, 3, 6, 7]);
        assert_eq!(KGrid::default_for(0).points(), &[0]);
        assert!(KGrid::from_points(vec![0], 10).is_ok());
        assert!(KGrid::from_points(vec![1, 2], 10).is_err());
        assert!(KGrid::from_points(vec![0, 5, 5], 10).is_err());
        assert!(KGrid::from_points(vec![0, 11], 10).is_err());
    }

    #[test]
    fn smoothing_and_ties() {
        assert_eq!(argmin_first(&[3.0, 1.0, 1.0, 2.0]), 1);
        assert_eq!(smooth3(&[3.0, 0.0, 3.0]), vec![1.5, 2.0, 1.5]);
        assert_eq!(smooth3(&[4.0]), vec![4.0]);
    }
}
