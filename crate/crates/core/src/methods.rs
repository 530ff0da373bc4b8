//! Single entry point over every estimator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{alb, fb, fcb, nb, AlbFit, ALB_DEFAULT_NU};
use crate::borrowing::{scan_with, BorrowResult, KGrid, ScanOptions};
use crate::calibration::{acib, Lambda};
use crate::data::{split, Dataset};
use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::influence::rank_and_nest;
use crate::nuisance::fit_rct_nuisances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Nb,
    Fb,
    Fcb,
    Alb,
    Aib,
    Acib,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Nb, Method::Fb, Method::Fcb, Method::Alb, Method::Aib, Method::Acib];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nb => "nb",
            Method::Fb => "fb",
            Method::Fcb => "fcb",
            Method::Alb => "alb",
            Method::Aib => "aib",
            Method::Acib => "acib",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOptions {
    pub scan: ScanOptions,
    /// Grid step for AIB/ACIB; `None` uses the default `max(1, N_E/20)`.
    pub grid_step: Option<usize>,
    /// Ridge weight of the bias regression (FCB, ACIB).
    pub lambda: Lambda,
    pub alb_nu: f64,
    pub alb_lambdas: Option<Vec<f64>>,
}

impl Default for MethodOptions {
    fn default() -> Self {
        MethodOptions {
            scan: ScanOptions::default(),
            grid_step: None,
            lambda: Lambda::CrossValidated,
            alb_nu: ALB_DEFAULT_NU,
            alb_lambdas: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodResult {
    pub method: Method,
    pub report: EstimateReport,
    pub borrowed: Vec<usize>,
    pub scan: Option<BorrowResult>,
    pub alb: Option<AlbFit>,
}

impl MethodResult {
    fn plain(method: Method, report: EstimateReport, borrowed: Vec<usize>) -> Self {
        MethodResult { method, report, borrowed, scan: None, alb: None }
    }
}

pub fn estimate(ds: &Dataset, method: Method, opts: &MethodOptions) -> Result<MethodResult> {
    let split = split(ds)?;
    let nopt = &opts.scan.nuisance;
    let e1 = opts.scan.e1_mode;
    let grid = || match opts.grid_step {
        Some(step) => KGrid::with_step(split.n_ec(), step),
        None => Ok(KGrid::default_for(split.n_ec())),
    };
    Ok(match method {
        Method::Nb => MethodResult::plain(method, nb(ds, &split, e1, nopt)?, Vec::new()),
        Method::Fb => MethodResult::plain(method, fb(ds, &split, e1, nopt)?, split.ec_indices.clone()),
        Method::Fcb => {
            MethodResult::plain(method, fcb(ds, &split, opts.lambda, e1, nopt)?, split.ec_indices.clone())
        }
        Method::Alb => {
            let (fit, report) = alb(ds, &split, opts.alb_lambdas.as_deref(), opts.alb_nu, e1, nopt)?;
            MethodResult { method, report, borrowed: fit.borrowed.clone(), scan: None, alb: Some(fit) }
        }
        Method::Aib => {
            let rct = fit_rct_nuisances(ds, &split, e1, nopt)?;
            let ranking = rank_and_nest(&rct.mu0, ds, &split.rct_control_indices, &split.ec_indices)?;
            let res = scan_with(ds, &split, &rct, &ranking, &grid()?, &opts.scan)?;
            MethodResult {
                method,
                report: res.final_report.clone(),
                borrowed: res.borrowed_indices.clone(),
                scan: Some(res),
                alb: None,
            }
        }
        Method::Acib => {
            let out = acib(ds, &split, opts.lambda, &grid()?, &opts.scan)?;
            MethodResult {
                method,
                report: out.result.final_report.clone(),
                borrowed: out.result.borrowed_indices.clone(),
                scan: Some(out.result),
                alb: None,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("ACIB".parse::<Method>().unwrap(), Method::Acib);
        assert!("ppp".parse::<Method>().is_err());
    }
}
