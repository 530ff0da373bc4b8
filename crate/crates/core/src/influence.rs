//! Influence scores of external controls against the trial control-arm
//! outcome model, and the nested candidate subsets they induce.
//!
//! For a candidate `z = (x, y)` the score is
//! `Σ_i |∇L(Z_i)ᵀ H⁻¹ ∇L(z)|` over trial controls `Z_i`, the first-order
//! change in each control's loss when `z` is infinitesimally upweighted.
//! Small scores mean the candidate barely moves the control model.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{augment, cholesky, penalty_mask};
use crate::nuisance::LinearFit;

/// Gradient of the squared loss `(y − μ(x; θ))²` with respect to `θ`.
pub fn gradient_at(fit: &LinearFit, x: &[f64], y: f64) -> DVector<f64> {
    let eta = fit.eta(x);
    let resid = y - fit.link().mean(eta);
    augment(x) * (-2.0 * resid * fit.link().slope(eta))
}

/// Precomputed `M = [g_iᵀ H⁻¹]_i` for one control-arm fit; each score is then
/// `‖M g_z‖₁`.
#[derive(Debug, Clone)]
pub struct InfluenceScorer {
    fit: LinearFit,
    m: DMatrix<f64>,
}

impl InfluenceScorer {
    /// `controls` must be exactly the rows `fit` was trained on. This is
    /// checked through the first-order optimality condition of the fit.
    pub fn new(fit: &LinearFit, ds: &Dataset, controls: &[usize]) -> Result<Self> {
        if controls.len() != fit.n_fit() {
            return Err(Error::InvalidArgument(format!(
                "fit used {} rows but {} controls were given",
                fit.n_fit(),
                controls.len()
            )));
        }
        let p = fit.theta().len();
        let mut grads = DMatrix::zeros(controls.len(), p);
        let mut mean_grad = DVector::zeros(p);
        for (r, &i) in controls.iter().enumerate() {
            let x: Vec<f64> = ds.covariates().row(i).iter().copied().collect();
            let g = gradient_at(fit, &x, ds.outcome()[i]);
            mean_grad += &g;
            grads.row_mut(r).copy_from(&g.transpose());
        }
        mean_grad /= controls.len() as f64;
        mean_grad += penalty_mask(p) * fit.theta() * (2.0 * fit.ridge());
        let scale = grads.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        if mean_grad.amax() > 1e-6 * scale {
            return Err(Error::InvalidArgument(
                "outcome fit is not the minimizer on the given controls".into(),
            ));
        }
        let chol = cholesky(fit.hessian())?;
        // H symmetric, so (G H⁻¹)ᵀ = H⁻¹ Gᵀ
        let m = chol.solve(&grads.transpose()).transpose();
        Ok(InfluenceScorer { fit: fit.clone(), m })
    }

    pub fn fit(&self) -> &LinearFit {
        &self.fit
    }

    pub fn score(&self, x: &[f64], y: f64) -> f64 {
        let g = gradient_at(&self.fit, x, y);
        (&self.m * g).iter().map(|v| v.abs()).sum()
    }
}

/// One-off score of a single candidate. Use [`InfluenceScorer`] for many.
pub fn influence_score(fit: &LinearFit, ds: &Dataset, controls: &[usize], x: &[f64], y: f64) -> Result<f64> {
    Ok(InfluenceScorer::new(fit, ds, controls)?.score(x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceRanking {
    /// EC row indices in dataset order.
    pub ec_indices: Vec<usize>,
    /// Score per entry of `ec_indices`.
    pub scores: Vec<f64>,
    /// EC row indices sorted by ascending score, ties by ascending index.
    pub order: Vec<usize>,
    pub model_hash: String,
}

impl InfluenceRanking {
    /// The `k` most comparable ECs.
    pub fn prefix(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn score_of(&self, row: usize) -> Option<f64> {
        self.ec_indices.iter().position(|&i| i == row).map(|p| self.scores[p])
    }

    /// `index,score` rows in ranking order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["rank", "index", "score"])?;
        let lookup: std::collections::HashMap<usize, f64> =
            self.ec_indices.iter().copied().zip(self.scores.iter().copied()).collect();
        for (rank, &i) in self.order.iter().enumerate() {
            w.write_record([rank.to_string(), i.to_string(), lookup[&i].to_string()])?;
        }
        w.flush().map_err(|source| Error::Io { path: "<writer>".into(), source })?;
        Ok(())
    }
}

pub fn rank_and_nest(fit: &LinearFit, ds: &Dataset, controls: &[usize], ecs: &[usize]) -> Result<InfluenceRanking> {
    let scorer = InfluenceScorer::new(fit, ds, controls)?;
    let scores: Vec<f64> = ecs
        .iter()
        .map(|&j| {
            let x: Vec<f64> = ds.covariates().row(j).iter().copied().collect();
            scorer.score(&x, ds.outcome()[j])
        })
        .collect();
    if let Some(p) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { row: ecs[p], column: "influence score".into() });
    }
    let mut idx: Vec<usize> = (0..ecs.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(ecs[a].cmp(&ecs[b])));
    Ok(InfluenceRanking {
        ec_indices: ecs.to_vec(),
        order: idx.iter().map(|&p| ecs[p]).collect(),
        scores,
        model_hash: fit.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::{fit_linear, Ridge};

    fn line_data() -> (Dataset, Vec<usize>) {
        // controls scattered around y = 2x
        let xs = [0.0, 0.5, 1.0, 1.5, 2.0, 0.2, 1.2];
        let ys = [0.1, 0.9, 2.2, 2.9, 4.1, 0.3, 2.5];
        let mut x: Vec<f64> = xs.to_vec();
        let mut y: Vec<f64> = ys.to_vec();
        // two ECs appended below
        x.extend([1.0, 1.0]);
        y.extend([0.0, 0.0]);
        let n = x.len();
        let ds = Dataset::new(
            DMatrix::from_column_slice(n, 1, &x),
            vec![false; n],
            y,
            (0..n).map(|i| i < 7).collect(),
        )
        .unwrap();
        (ds, (0..7).collect())
    }

    fn fit_controls(ds: &Dataset, controls: &[usize]) -> LinearFit {
        let y: Vec<f64> = controls.iter().map(|&i| ds.outcome()[i]).collect();
        fit_linear(&ds.covariates().select_rows(controls), &y, Ridge::Fixed(0.0)).unwrap()
    }

    #[test]
    fn gradient_by_hand() {
        let ds = Dataset::new(
            DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]),
            vec![false; 3],
            vec![0.0, 2.0, 4.0],
            vec![true; 3],
        )
        .unwrap();
        let fit = fit_controls(&ds, &[0, 1, 2]);
        let g = gradient_at(&fit, &[1.0], 3.0);
        assert!((g[0] + 2.0).abs() < 1e-12 && (g[1] + 2.0).abs() < 1e-12);
        let on_line = gradient_at(&fit, &[1.5], 3.0);
        assert!(on_line.amax() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (ds, controls) = line_data();
        let fit = fit_controls(&ds, &controls);
        let (x, y) = ([0.7], 3.3);
        let g = gradient_at(&fit, &x, y);
        let loss = |theta: &DVector<f64>| (y - theta[0] - theta[1] * x[0]).powi(2);
        let h = 1e-5;
        for k in 0..2 {
            let mut up = fit.theta().clone();
            let mut dn = fit.theta().clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0));
        }
    }

    #[test]
    fn zero_residual_scores_zero() {
        let (ds, controls) = line_data();
        let fit = fit_controls(&ds, &controls);
        let x = [0.8];
        let y = fit.predict(&x);
        assert_eq!(influence_score(&fit, &ds, &controls, &x, y).unwrap(), 0.0);
        assert!(influence_score(&fit, &ds, &controls, &x, y + 1.0).unwrap() > 0.0);
    }

    #[test]
    fn on_line_candidate_ranks_first() {
        let (ds, controls) = line_data();
        let fit = fit_controls(&ds, &controls);
        let on = fit.predict(&[1.0]);
        let ds = ds.with_outcomes(&[7, 8], &[5.0, on]).unwrap();
        let r = rank_and_nest(&fit, &ds, &controls, &[7, 8]).unwrap();
        assert_eq!(r.order, vec![8, 7]);
        assert_eq!(r.prefix(1), &[8]);
    }

    #[test]
    fn duplicate_rows_tie_by_index() {
        let (ds, controls) = line_data();
        let fit = fit_controls(&ds, &controls);
        let r = rank_and_nest(&fit, &ds, &controls, &[8, 7]).unwrap();
        assert_eq!(r.scores[0], r.scores[1]);
        assert_eq!(r.order, vec![7, 8]);
    }

    #[test]
    fn wrong_controls_rejected() {
        let (ds, controls) = line_data();
        let fit = fit_controls(&ds, &controls);
        assert!(InfluenceScorer::new(&fit, &ds, &controls[..6]).is_err());
        let shuffled = [0, 1, 2, 3, 4, 5, 7];
        assert!(InfluenceScorer::new(&fit, &ds, &shuffled).is_err());
    }

    #[test]
    fn csv_dump_in_rank_order() {
        let (ds, controls) = line_data();
        let fit = fit_controls(&ds, &controls);
        let r = rank_and_nest(&fit, &ds, &controls, &[7, 8]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("rank,index,score\n0,7,"));
        assert_eq!(text.lines().count(), 3);
    }
}
