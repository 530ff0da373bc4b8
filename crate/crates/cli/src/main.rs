//! `ecborrow` command-line interface.
//!
//! Every run writes its outputs plus a `manifest.json` into `--out-dir`.
//! Exit status: 0 on success, 2 on invalid input, 3 on numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecborrow::baselines::ALB_DEFAULT_NU;
use ecborrow::borrowing::{mse_curve_export, scan_with, KGrid, ScanOptions};
use ecborrow::calibration::{acib, calibrate, fit_bias, Lambda};
use ecborrow::data::{load_csv, split, standardize, write_csv, Dataset, Schema};
use ecborrow::influence::rank_and_nest;
use ecborrow::nuisance::{fit_rct_nuisances, E1Mode, NuisanceOptions, OutcomeLink};
use ecborrow::simulation::{delta_sweep, generate, write_reports_csv, DgpConfig, Mechanism};
use ecborrow::{estimate, Error, Method, MethodOptions};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "ecborrow", version, about = "Adaptive borrowing of external controls")]
struct Cli {
    /// Directory for outputs and the run manifest.
    #[arg(long, env = "ECBORROW_OUT_DIR", default_value = "ecborrow-out", global = true)]
    out_dir: PathBuf,
    /// Worker threads for grid scans and replications.
    #[arg(long, env = "ECBORROW_JOBS", global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the treatment effect with one method.
    Estimate(EstimateArgs),
    /// Write the estimated-MSE curve over the borrowing grid.
    Sweep(SweepArgs),
    /// Fit the bias function and optionally dump calibrated EC outcomes.
    Calibrate(CalibrateArgs),
    /// Write influence scores of every EC in ranking order.
    Influence(DataArgs),
    /// Run a seeded replication study on the synthetic designs.
    Simulate(SimulateArgs),
    /// Write one synthetic dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long, env = "ECBORROW_DATA")]
    data: PathBuf,
    /// Inline `covariates=a,b;treatment=t;outcome=y;source=r` or a JSON file.
    #[arg(long, env = "ECBORROW_SCHEMA")]
    schema: String,
    /// Covariates to center and scale before fitting.
    #[arg(long, env = "ECBORROW_STANDARDIZE", value_delimiter = ',')]
    standardize: Vec<String>,
    /// Outcome model link: identity or exp.
    #[arg(long, env = "ECBORROW_LINK", default_value = "identity", value_parser = parse_link)]
    link: OutcomeLink,
    /// Trial propensity: design, fitted, or a probability in (0, 1).
    #[arg(long, env = "ECBORROW_E1", default_value = "design", value_parser = parse_e1)]
    e1: E1Mode,
}

#[derive(Args, Debug, Serialize)]
struct TuningArgs {
    /// Grid step for the borrowing scan; default max(1, N_E/20).
    #[arg(long, env = "ECBORROW_GRID_STEP")]
    grid_step: Option<usize>,
    /// Ridge weight of the bias regression; cross-validated when absent.
    #[arg(long, env = "ECBORROW_LAMBDA")]
    lambda: Option<f64>,
    /// Adaptive-lasso exponent.
    #[arg(long, env = "ECBORROW_NU", default_value_t = ALB_DEFAULT_NU)]
    nu: f64,
    /// Adaptive-lasso penalty grid; default {0.01, 0.1, 1, 10}·sqrt(N_E).
    #[arg(long, env = "ECBORROW_ALB_LAMBDAS", value_delimiter = ',')]
    alb_lambdas: Vec<f64>,
    /// Smooth the MSE curve with a 3-point moving average before the argmin.
    #[arg(long, env = "ECBORROW_SMOOTH")]
    smooth: bool,
}

impl TuningArgs {
    fn options(&self, nuisance: NuisanceOptions, e1_mode: E1Mode) -> MethodOptions {
        MethodOptions {
            scan: ScanOptions { nuisance, e1_mode, smooth: self.smooth, parallel: true },
            grid_step: self.grid_step,
            lambda: self.lambda.map_or(Lambda::CrossValidated, Lambda::Fixed),
            alb_nu: self.nu,
            alb_lambdas: (!self.alb_lambdas.is_empty()).then(|| self.alb_lambdas.clone()),
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// One of nb, fb, fcb, alb, aib, acib.
    #[arg(long, env = "ECBORROW_METHOD", value_parser = parse_method)]
    method: Method,
    #[command(flatten)]
    tuning: TuningArgs,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// aib or acib.
    #[arg(long, env = "ECBORROW_METHOD", default_value = "aib", value_parser = parse_method)]
    method: Method,
    /// Explicit grid points, starting at 0.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<usize>,
    #[command(flatten)]
    tuning: TuningArgs,
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, env = "ECBORROW_LAMBDA")]
    lambda: Option<f64>,
    /// Also write per-EC `ec_index,y,b_hat,y_tilde` rows.
    #[arg(long)]
    dump: bool,
}

#[derive(Args, Debug, Serialize)]
struct DesignArgs {
    /// linear or nonlinear.
    #[arg(long, env = "ECBORROW_MECHANISM", default_value = "linear", value_parser = parse_mechanism)]
    mechanism: Mechanism,
    #[arg(long, env = "ECBORROW_DELTA", default_value_t = 2.0)]
    delta: f64,
    #[arg(long, env = "ECBORROW_SEED", default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "ECBORROW_BETA_SEED", default_value_t = 1)]
    beta_seed: u64,
    /// JSON file with design fields; flags above override it.
    #[arg(long, env = "ECBORROW_CONFIG")]
    config: Option<PathBuf>,
}

impl DesignArgs {
    fn config(&self) -> Result<DgpConfig, Error> {
        let base = match &self.config {
            Some(path) => serde_json::from_str(&read_text(path)?)?,
            None => DgpConfig::default(),
        };
        Ok(DgpConfig {
            mechanism: self.mechanism,
            delta: self.delta,
            seed: self.seed,
            beta_seed: self.beta_seed,
            ..base
        })
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Run one study per listed delta and write a long-format table.
    #[arg(long, value_delimiter = ',')]
    delta_sweep: Vec<f64>,
    #[arg(long, env = "ECBORROW_REPS", default_value_t = 200)]
    reps: usize,
    /// Methods to compare; all when empty.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Vec<Method>,
    #[command(flatten)]
    tuning: TuningArgs,
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Output file name inside the output directory.
    #[arg(long, default_value = "synthetic.csv")]
    name: String,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_link(s: &str) -> Result<OutcomeLink, String> {
    match s {
        "identity" | "linear" => Ok(OutcomeLink::Identity),
        "exp" | "exponential" => Ok(OutcomeLink::Exp),
        _ => Err(format!("unknown link '{s}'")),
    }
}

fn parse_e1(s: &str) -> Result<E1Mode, String> {
    match s {
        "design" => Ok(E1Mode::DesignRatio),
        "fitted" => Ok(E1Mode::Fitted),
        p => p.parse::<f64>().map(E1Mode::Known).map_err(|_| format!("unknown propensity mode '{s}'")),
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects output files and writes the manifest last.
struct Run {
    out_dir: PathBuf,
    command: &'static str,
    inputs: serde_json::Value,
    seeds: Vec<u64>,
    outputs: Vec<String>,
}

impl Run {
    fn new(out_dir: &Path, command: &'static str, args: &impl Serialize) -> Result<Self, Error> {
        fs::create_dir_all(out_dir).map_err(|source| Error::Io { path: out_dir.into(), source })?;
        Ok(Run {
            out_dir: out_dir.to_path_buf(),
            command,
            inputs: serde_json::to_value(args)?,
            seeds: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), Error> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(|source| Error::Io { path, source })?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Error> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn finish(mut self, extra: serde_json::Value) -> Result<(), Error> {
        let canonical = serde_json::to_vec(&json!({ "command": self.command, "inputs": self.inputs, "extra": extra }))?;
        let manifest = json!({
            "command": self.command,
            "config_hash": sha256_hex(&canonical),
            "seeds": self.seeds,
            "version": concat!("ecborrow ", env!("CARGO_PKG_VERSION")),
            "inputs": self.inputs,
            "extra": extra,
            "outputs": self.outputs,
        });
        self.outputs.clear();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.out_dir.join("manifest.json");
        fs::write(&path, text).map_err(|source| Error::Io { path, source })
    }
}

struct Loaded {
    ds: Dataset,
    data_sha256: String,
    nuisance: NuisanceOptions,
}

fn load(args: &DataArgs) -> Result<Loaded, Error> {
    let schema = if args.schema.contains('=') {
        Schema::parse_inline(&args.schema)?
    } else {
        serde_json::from_str(&read_text(Path::new(&args.schema))?)?
    };
    let bytes = fs::read(&args.data).map_err(|source| Error::Io { path: args.data.clone(), source })?;
    let mut ds = load_csv(&args.data, &schema)?;
    if !args.standardize.is_empty() {
        let cols = args
            .standardize
            .iter()
            .map(|name| {
                ds.covariate_names()
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        ds = standardize(&ds, &cols)?.0;
    }
    let nuisance = NuisanceOptions { link: args.link, ..NuisanceOptions::default() };
    Ok(Loaded { ds, data_sha256: sha256_hex(&bytes), nuisance })
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T, Error> + Send) -> Result<T, Error> {
    ecborrow::simulation::with_jobs(jobs, f)?
}

fn cmd_estimate(cli: &Cli, args: &EstimateArgs) -> Result<(), Error> {
    let loaded = load(&args.data)?;
    let opts = args.tuning.options(loaded.nuisance, args.data.e1);
    let res = with_jobs(cli.jobs, || estimate(&loaded.ds, args.method, &opts))?;
    let r = &res.report;
    let mut run = Run::new(&cli.out_dir, "estimate", args)?;
    run.write_json(
        "estimate.json",
        &json!({
            "method": res.method,
            "tau_hat": r.tau_hat,
            "se_hat": r.se_hat,
            "bias_hat": r.bias_hat,
            "mse_hat": r.mse_hat,
            "ci95": r.ci95(),
            "n_used": r.n_used,
            "k_borrowed": r.k_borrowed,
            "clipped_rows": r.clipped_rows,
            "borrowed_indices": res.borrowed,
        }),
    )?;
    if let Some(scan) = &res.scan {
        run.write("mse_curve.csv", mse_curve_export(scan)?.as_bytes())?;
    }
    println!("{} {}", res.method, r.summary_line());
    run.finish(json!({ "data_sha256": loaded.data_sha256 }))
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<(), Error> {
    if !matches!(args.method, Method::Aib | Method::Acib) {
        return Err(Error::InvalidArgument("sweep supports aib and acib".into()));
    }
    let loaded = load(&args.data)?;
    let ds = &loaded.ds;
    let sp = split(ds)?;
    let opts = args.tuning.options(loaded.nuisance, args.data.e1);
    let grid = match (args.grid.is_empty(), args.tuning.grid_step) {
        (false, _) => KGrid::from_points(args.grid.clone(), sp.n_ec())?,
        (true, Some(step)) => KGrid::with_step(sp.n_ec(), step)?,
        (true, None) => KGrid::default_for(sp.n_ec()),
    };
    let result = with_jobs(cli.jobs, || match args.method {
        Method::Acib => Ok(acib(ds, &sp, opts.lambda, &grid, &opts.scan)?.result),
        _ => {
            let rct = fit_rct_nuisances(ds, &sp, opts.scan.e1_mode, &opts.scan.nuisance)?;
            let ranking = rank_and_nest(&rct.mu0, ds, &sp.rct_control_indices, &sp.ec_indices)?;
            scan_with(ds, &sp, &rct, &ranking, &grid, &opts.scan)
        }
    })?;
    let mut run = Run::new(&cli.out_dir, "sweep", args)?;
    run.write("mse_curve.csv", mse_curve_export(&result)?.as_bytes())?;
    println!("{} k_hat={} {}", args.method, result.k_hat, result.final_report.summary_line());
    run.finish(json!({ "data_sha256": loaded.data_sha256, "k_hat": result.k_hat }))
}

fn cmd_calibrate(cli: &Cli, args: &CalibrateArgs) -> Result<(), Error> {
    let loaded = load(&args.data)?;
    let ds = &loaded.ds;
    let sp = split(ds)?;
    let lambda = args.lambda.map_or(Lambda::CrossValidated, Lambda::Fixed);
    let fit = fit_bias(ds, &sp, lambda, &loaded.nuisance)?;
    let mut run = Run::new(&cli.out_dir, "calibrate", args)?;
    run.write_json(
        "bias_fit.json",
        &json!({
            "theta_b": fit.theta_b.as_slice(),
            "lambda": fit.lambda,
            "m_all": fit.m_all.to_json(),
            "pi0": fit.pi0.to_json(),
        }),
    )?;
    if args.dump {
        let cal = calibrate(ds, &sp, &fit);
        let mut buf = Vec::new();
        cal.write_csv(ds, &mut buf)?;
        run.write("calibrated_ecs.csv", &buf)?;
    }
    let theta: Vec<String> = fit.theta_b.iter().map(|v| format!("{v:.6}")).collect();
    println!("theta_b=[{}] lambda={}", theta.join(", "), fit.lambda);
    run.finish(json!({ "data_sha256": loaded.data_sha256 }))
}

fn cmd_influence(cli: &Cli, args: &DataArgs) -> Result<(), Error> {
    let loaded = load(args)?;
    let ds = &loaded.ds;
    let sp = split(ds)?;
    let rct = fit_rct_nuisances(ds, &sp, args.e1, &loaded.nuisance)?;
    let ranking = rank_and_nest(&rct.mu0, ds, &sp.rct_control_indices, &sp.ec_indices)?;
    let mut buf = Vec::new();
    ranking.write_csv(&mut buf)?;
    let mut run = Run::new(&cli.out_dir, "influence", args)?;
    run.write("influence.csv", &buf)?;
    println!("ranked {} ECs, model {}", ranking.len(), ranking.model_hash);
    run.finish(json!({ "data_sha256": loaded.data_sha256, "model_hash": ranking.model_hash }))
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> Result<(), Error> {
    let config = args.design.config()?;
    let methods = if args.methods.is_empty() { Method::ALL.to_vec() } else { args.methods.clone() };
    let opts = args.tuning.options(NuisanceOptions::default(), E1Mode::DesignRatio);
    let deltas = if args.delta_sweep.is_empty() { vec![config.delta] } else { args.delta_sweep.clone() };
    let runs = delta_sweep(&config, &deltas, &methods, args.reps, &opts, cli.jobs)?;
    let reports: Vec<_> = runs.iter().flat_map(|r| r.reports.iter().cloned()).collect();
    let mut buf = Vec::new();
    write_reports_csv(&reports, &mut buf)?;
    let mut run = Run::new(&cli.out_dir, "simulate", args)?;
    run.seeds = vec![config.seed, config.beta_seed];
    run.write("simulation.csv", &buf)?;
    for r in &reports {
        println!(
            "delta={} {:5} est={:.4} |bias|={:.4} sd={:.4} mse={:.5} n_ecs={}",
            r.delta, r.method, r.est_mean, r.bias_abs, r.sd_empirical, r.mse_empirical, r.n_ecs_modal
        );
    }
    run.finish(json!({ "config": config }))
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> Result<(), Error> {
    let config = args.design.config()?;
    let ds = generate(&config)?;
    let schema = Schema {
        covariates: ds.covariate_names().to_vec(),
        treatment: "a".into(),
        outcome: "y".into(),
        source: "r".into(),
    };
    let mut run = Run::new(&cli.out_dir, "generate", args)?;
    run.seeds = vec![config.seed, config.beta_seed];
    write_csv(&ds, run.out_dir.join(&args.name), &schema)?;
    run.outputs.push(args.name.clone());
    println!("wrote {} rows; schema {}", ds.n(), inline_schema(&schema));
    run.finish(json!({ "config": config, "schema": inline_schema(&schema) }))
}

fn inline_schema(s: &Schema) -> String {
    format!("covariates={};treatment={};outcome={};source={}", s.covariates.join(","), s.treatment, s.outcome, s.source)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(&cli, a),
        Command::Sweep(a) => cmd_sweep(&cli, a),
        Command::Calibrate(a) => cmd_calibrate(&cli, a),
        Command::Influence(a) => cmd_influence(&cli, a),
        Command::Simulate(a) => cmd_simulate(&cli, a),
        Command::Generate(a) => cmd_generate(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (stage, code) = if e.is_validation() { ("input", 2) } else { ("numerical", 3) };
            eprintln!("error ({stage}): {e}");
            ExitCode::from(code)
        }
    }
}
