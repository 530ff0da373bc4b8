//! Python bindings: datasets, every estimator, influence ranking, calibration
//! and the simulation harness.

use ecborrow::borrowing::{scan_with, KGrid, ScanOptions};
use ecborrow::calibration::{calibrate as calibrate_ecs, fit_bias, Lambda};
use ecborrow::data::{self, Schema};
use ecborrow::influence::rank_and_nest;
use ecborrow::nuisance::{fit_rct_nuisances, E1Mode, NuisanceOptions, OutcomeLink};
use ecborrow::simulation::{self, DgpConfig, Mechanism};
use ecborrow::{Error, Method, MethodOptions};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyArithmeticError::new_err(e.to_string())
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn nuisance(link: &str) -> PyResult<NuisanceOptions> {
    let link = match link {
        "identity" => OutcomeLink::Identity,
        "exp" => OutcomeLink::Exp,
        other => return Err(PyValueError::new_err(format!("unknown link '{other}'"))),
    };
    Ok(NuisanceOptions { link, ..NuisanceOptions::default() })
}

fn e1_mode(e1: &str) -> PyResult<E1Mode> {
    match e1 {
        "design" => Ok(E1Mode::DesignRatio),
        "fitted" => Ok(E1Mode::Fitted),
        p => p
            .parse::<f64>()
            .map(E1Mode::Known)
            .map_err(|_| PyValueError::new_err(format!("unknown propensity mode '{e1}'"))),
    }
}

/// Trial rows plus external controls.
#[pyclass(name = "Dataset", module = "ecborrow_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (covariates, treatment, outcome, source, names=None))]
    fn new(
        covariates: Vec<Vec<f64>>,
        treatment: Vec<bool>,
        outcome: Vec<f64>,
        source: Vec<bool>,
        names: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let n = covariates.len();
        let d = covariates.first().map_or(0, Vec::len);
        if covariates.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("covariate rows have unequal lengths"));
        }
        let x = DMatrix::from_row_iterator(n, d, covariates.into_iter().flatten());
        let names = names.unwrap_or_else(|| (1..=d).map(|j| format!("x{j}")).collect());
        let inner = data::Dataset::with_names(x, treatment, outcome, source, names).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    /// Loads a CSV with an inline `covariates=..;treatment=..;outcome=..;source=..` schema.
    #[staticmethod]
    fn from_csv(path: &str, schema: &str) -> PyResult<Self> {
        let schema = Schema::parse_inline(schema).map_err(to_py)?;
        Ok(PyDataset { inner: data::load_csv(path, &schema).map_err(to_py)? })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        data::write_csv(&self.inner, path, &Schema::for_dataset(&self.inner)).map_err(to_py)
    }

    /// Copy with the named covariates centered and scaled.
    fn standardized(&self, columns: Vec<String>) -> PyResult<Self> {
        let idx = columns
            .iter()
            .map(|c| {
                self.inner
                    .covariate_names()
                    .iter()
                    .position(|n| n == c)
                    .ok_or_else(|| PyValueError::new_err(format!("no covariate '{c}'")))
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(PyDataset { inner: data::standardize(&self.inner, &idx).map_err(to_py)?.0 })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.covariate_names().to_vec()
    }

    #[getter]
    fn outcome(&self) -> Vec<f64> {
        self.inner.outcome().to_vec()
    }

    #[getter]
    fn source(&self) -> Vec<bool> {
        self.inner.source().to_vec()
    }

    #[getter]
    fn treatment(&self) -> Vec<bool> {
        self.inner.treatment().to_vec()
    }

    fn __repr__(&self) -> String {
        let n_rct = self.inner.source().iter().filter(|&&r| r).count();
        format!("Dataset(n={}, d={}, rct={}, ec={})", self.inner.n(), self.inner.d(), n_rct, self.inner.n() - n_rct)
    }
}

#[pyclass(name = "EstimateReport", module = "ecborrow_py", frozen, get_all)]
struct PyReport {
    method: String,
    tau_hat: f64,
    se_hat: f64,
    bias_hat: f64,
    mse_hat: f64,
    n_used: usize,
    k_borrowed: usize,
    clipped_rows: usize,
    borrowed: Vec<usize>,
}

#[pymethods]
impl PyReport {
    fn ci95(&self) -> (f64, f64) {
        (self.tau_hat - 1.96 * self.se_hat, self.tau_hat + 1.96 * self.se_hat)
    }

    fn __repr__(&self) -> String {
        format!(
            "EstimateReport(method={}, tau_hat={:.6}, se_hat={:.6}, mse_hat={:.6}, k_borrowed={})",
            self.method, self.tau_hat, self.se_hat, self.mse_hat, self.k_borrowed
        )
    }
}

fn method_options(grid_step: Option<usize>, lambda: Option<f64>, e1: &str, link: &str) -> PyResult<MethodOptions> {
    let scan = ScanOptions { nuisance: nuisance(link)?, e1_mode: e1_mode(e1)?, ..ScanOptions::default() };
    Ok(MethodOptions {
        scan,
        grid_step,
        lambda: lambda.map_or(Lambda::CrossValidated, Lambda::Fixed),
        ..MethodOptions::default()
    })
}

/// Estimates the treatment effect with `method` in {nb, fb, fcb, alb, aib, acib}.
#[pyfunction]
#[pyo3(signature = (dataset, method, grid_step=None, lam=None, e1="design", link="identity"))]
fn estimate(
    py: Python<'_>,
    dataset: &PyDataset,
    method: &str,
    grid_step: Option<usize>,
    lam: Option<f64>,
    e1: &str,
    link: &str,
) -> PyResult<PyReport> {
    let method: Method = parse(method)?;
    let opts = method_options(grid_step, lam, e1, link)?;
    let ds = dataset.inner.clone();
    let res = py.detach(move || ecborrow::estimate(&ds, method, &opts)).map_err(to_py)?;
    let r = res.report;
    Ok(PyReport {
        method: method.to_string(),
        tau_hat: r.tau_hat,
        se_hat: r.se_hat,
        bias_hat: r.bias_hat,
        mse_hat: r.mse_hat,
        n_used: r.n_used,
        k_borrowed: r.k_borrowed,
        clipped_rows: r.clipped_rows,
        borrowed: res.borrowed,
    })
}

/// `(row_index, score)` for every EC, most comparable first.
#[pyfunction]
#[pyo3(signature = (dataset, link="identity"))]
fn influence_scores(dataset: &PyDataset, link: &str) -> PyResult<Vec<(usize, f64)>> {
    let ds = &dataset.inner;
    let sp = data::split(ds).map_err(to_py)?;
    let rct = fit_rct_nuisances(ds, &sp, E1Mode::DesignRatio, &nuisance(link)?).map_err(to_py)?;
    let ranking = rank_and_nest(&rct.mu0, ds, &sp.rct_control_indices, &sp.ec_indices).map_err(to_py)?;
    Ok(ranking.order.iter().map(|&j| (j, ranking.score_of(j).expect("ranked row"))).collect())
}

/// `(k, mse_hat, bias_hat, se_hat)` over the AIB borrowing grid.
#[pyfunction]
#[pyo3(signature = (dataset, grid_step=None, link="identity"))]
fn mse_curve(dataset: &PyDataset, grid_step: Option<usize>, link: &str) -> PyResult<Vec<(usize, f64, f64, f64)>> {
    let ds = &dataset.inner;
    let sp = data::split(ds).map_err(to_py)?;
    let scan = ScanOptions { nuisance: nuisance(link)?, ..ScanOptions::default() };
    let rct = fit_rct_nuisances(ds, &sp, scan.e1_mode, &scan.nuisance).map_err(to_py)?;
    let ranking = rank_and_nest(&rct.mu0, ds, &sp.rct_control_indices, &sp.ec_indices).map_err(to_py)?;
    let grid = match grid_step {
        Some(s) => KGrid::with_step(sp.n_ec(), s).map_err(to_py)?,
        None => KGrid::default_for(sp.n_ec()),
    };
    let res = scan_with(ds, &sp, &rct, &ranking, &grid, &scan).map_err(to_py)?;
    Ok(grid
        .points()
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, res.mse_curve[i], res.bias_curve[i], res.se_curve[i]))
        .collect())
}

/// Fits the bias function; returns `(theta_b, lambda, calibrated EC outcomes)`.
#[pyfunction]
#[pyo3(signature = (dataset, lam=None))]
fn calibrate(dataset: &PyDataset, lam: Option<f64>) -> PyResult<(Vec<f64>, f64, Vec<f64>)> {
    let ds = &dataset.inner;
    let sp = data::split(ds).map_err(to_py)?;
    let lambda = lam.map_or(Lambda::CrossValidated, Lambda::Fixed);
    let fit = fit_bias(ds, &sp, lambda, &NuisanceOptions::default()).map_err(to_py)?;
    let cal = calibrate_ecs(ds, &sp, &fit);
    Ok((fit.theta_b.as_slice().to_vec(), fit.lambda, cal.y_tilde))
}

fn design(mechanism: &str, delta: f64, seed: u64, beta_seed: u64) -> PyResult<DgpConfig> {
    let mechanism: Mechanism = parse(mechanism)?;
    Ok(DgpConfig { mechanism, delta, seed, beta_seed, ..DgpConfig::default() })
}

/// One synthetic dataset from the simulation design.
#[pyfunction]
#[pyo3(signature = (mechanism="linear", delta=2.0, seed=1, beta_seed=1))]
fn generate(mechanism: &str, delta: f64, seed: u64, beta_seed: u64) -> PyResult<PyDataset> {
    Ok(PyDataset { inner: simulation::generate(&design(mechanism, delta, seed, beta_seed)?).map_err(to_py)? })
}

/// Replication study; one dict of summary metrics per method.
#[pyfunction]
#[pyo3(signature = (methods, reps=200, mechanism="linear", delta=2.0, seed=1, beta_seed=1, grid_step=None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    methods: Vec<String>,
    reps: usize,
    mechanism: &str,
    delta: f64,
    seed: u64,
    beta_seed: u64,
    grid_step: Option<usize>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let methods = methods.iter().map(|m| parse::<Method>(m)).collect::<PyResult<Vec<_>>>()?;
    let config = design(mechanism, delta, seed, beta_seed)?;
    let opts = MethodOptions { grid_step, ..MethodOptions::default() };
    let run = py.detach(move || simulation::replicate(&config, &methods, reps, &opts, None)).map_err(to_py)?;
    run.reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", r.method.to_string())?;
            d.set_item("est_mean", r.est_mean)?;
            d.set_item("bias_abs", r.bias_abs)?;
            d.set_item("sd_empirical", r.sd_empirical)?;
            d.set_item("sd_estimated_mean", r.sd_estimated_mean)?;
            d.set_item("mse_empirical", r.mse_empirical)?;
            d.set_item("mse_nominal", r.mse_nominal)?;
            d.set_item("n_ecs_modal", r.n_ecs_modal)?;
            d.set_item("n_reps", r.n_reps)?;
            d.set_item("n_failed", r.n_failed)?;
            d.set_item("tau_true", r.tau_true)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn ecborrow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(influence_scores, m)?)?;
    m.add_function(wrap_pyfunction!(mse_curve, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("METHODS", Method::ALL.iter().map(|m| m.to_string()).collect::<Vec<_>>())?;
    Ok(())
}
