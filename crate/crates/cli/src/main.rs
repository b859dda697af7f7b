use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use finprint::io::DatasetManifest;
use finprint::simulate::{ReplicateRecord, SimulationReport};
use finprint::variance::default_bounds;
use finprint::{
    build_cache, fit_with_cache, select_lambda, validate_dataset, DetectionDataset, Error, FitOptions, FitResult,
    LambdaCurve, SelectionCriterion, Simulation, SimulationScenario,
};
use nalgebra::DVector;
use serde::Serialize;
use sha2::{Digest, Sha256};

const EXIT_INPUT: u8 = 2;
const EXIT_NO_FEASIBLE: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "finprint", version, about = "Regularized optimal fingerprinting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit scaling factors and write a JSON report.
    Fit {
        manifest: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the (lambda, trace_xi) curve as CSV.
    LambdaCurve {
        manifest: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a Monte Carlo scenario.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long, env = "FINPRINT_SEED")]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        grid_size: Option<usize>,
        /// JSON report path; the per-replicate table goes next to it.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-replicate CSV path, overriding the default.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Print the version
    Version,
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = finprint::variance::DEFAULT_GRID_SIZE)]
    grid_size: usize,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_INPUT,
            Failure::Core(Error::NoFeasiblePoint { .. }) => EXIT_NO_FEASIBLE,
            Failure::Core(e) if e.is_input_error() => EXIT_INPUT,
            Failure::Core(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Usage(msg) => f.write_str(msg),
        }
    }
}

type CliResult<R> = std::result::Result<R, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit { manifest, grid, output } => cmd_fit(&manifest, &grid, output.as_deref()),
        Command::LambdaCurve { manifest, grid, output } => cmd_lambda_curve(&manifest, &grid, output.as_deref()),
        Command::Simulate {
            scenario,
            replicates,
            seed,
            jobs,
            alpha,
            grid_size,
            output,
            table,
        } => cmd_simulate(
            &scenario,
            SimulateOverrides {
                replicates,
                seed,
                alpha,
                grid_size,
            },
            jobs,
            output.as_deref(),
            table.as_deref(),
        ),
        Command::Version => {
            println!("finprint {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("finprint: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_output(path: Option<&Path>, body: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|source| {
            Failure::Core(Error::Io {
                path: p.display().to_string(),
                source,
            })
        }),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

struct Loaded {
    dataset: DetectionDataset<f64>,
    inputs: Vec<InputHash>,
}

fn load(manifest_path: &Path) -> CliResult<Loaded> {
    let manifest = DatasetManifest::from_path(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let dataset = manifest.load(base)?;
    let mut inputs = vec![InputHash {
        path: manifest_path.display().to_string(),
        sha256: sha256_file(manifest_path)?,
    }];
    for file in manifest.referenced_files(base) {
        inputs.push(InputHash {
            sha256: sha256_file(&file)?,
            path: file.display().to_string(),
        });
    }
    Ok(Loaded { dataset, inputs })
}

fn check_grid(grid: &GridArgs) -> CliResult<()> {
    if !(grid.alpha > 0.0 && grid.alpha < 1.0) {
        return Err(Failure::Usage(format!("--alpha must lie in (0, 1), got {}", grid.alpha)));
    }
    if grid.grid_size < 2 {
        return Err(Failure::Usage("--grid-size must be at least 2".into()));
    }
    Ok(())
}

/// Search bounds: flags where given, the default `[0.01τ̄, 10τ̄]` otherwise.
fn resolve_bounds(grid: &GridArgs, tau_bar: f64) -> CliResult<(f64, f64)> {
    let (lo, hi) = default_bounds(tau_bar);
    let bounds = (grid.lambda_min.unwrap_or(lo), grid.lambda_max.unwrap_or(hi));
    if !(bounds.0 > 0.0 && bounds.0 < bounds.1 && bounds.1.is_finite()) {
        return Err(Failure::Usage(format!(
            "lambda bounds must satisfy 0 < min < max, got [{}, {}]",
            bounds.0, bounds.1
        )));
    }
    Ok(bounds)
}

struct Prepared {
    cache: finprint::SpectralCacheF64,
    sizes: Vec<usize>,
    bounds: (f64, f64),
    warnings: Vec<String>,
}

fn prepare(ds: &DetectionDataset<f64>, grid: &GridArgs) -> CliResult<Prepared> {
    check_grid(grid)?;
    let report = validate_dataset(ds)?;
    let s = ds.sample_covariance()?;
    let cache = build_cache(&s, &ds.x_tilde, &ds.y)?;
    let bounds = resolve_bounds(grid, cache.tau_bar())?;
    for w in &report.warnings {
        eprintln!("finprint: warning: {w}");
    }
    Ok(Prepared {
        cache,
        sizes: ds.ensemble_sizes.clone(),
        bounds,
        warnings: report.warnings.iter().map(|w| w.to_string()).collect(),
    })
}

#[derive(Serialize)]
struct ForcingReport {
    index: usize,
    beta_hat: f64,
    xi_hat_ii: f64,
    ci_lower: f64,
    ci_upper: f64,
    detected: bool,
    attributed: bool,
}

#[derive(Serialize)]
struct JointReport {
    beta0: Vec<f64>,
    statistic: f64,
    threshold: f64,
    inside: bool,
}

#[derive(Serialize)]
struct CurveRow {
    lambda: f64,
    trace_xi: Option<f64>,
    feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
}

#[derive(Serialize)]
struct GridSpec {
    lower: f64,
    upper: f64,
    size: usize,
    spacing: &'static str,
    criterion: &'static str,
}

#[derive(Serialize)]
struct Provenance {
    version: &'static str,
    inputs: Vec<InputHash>,
    grid: GridSpec,
}

#[derive(Serialize)]
struct Diagnostics {
    tau_bar: f64,
    denominator: f64,
    k_hat: f64,
    tls_min_eigenvalue: f64,
    tls_near_degenerate: bool,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct FitReport {
    n_dim: usize,
    m_runs: usize,
    alpha: f64,
    lambda_opt: f64,
    beta_hat: Vec<f64>,
    xi_hat: Vec<Vec<f64>>,
    forcings: Vec<ForcingReport>,
    joint_region: Option<JointReport>,
    diagnostics: Diagnostics,
    lambda_curve: Vec<CurveRow>,
    provenance: Provenance,
}

fn curve_rows(curve: &LambdaCurve<f64>) -> Vec<CurveRow> {
    curve
        .points
        .iter()
        .map(|p| CurveRow {
            lambda: p.lambda,
            trace_xi: p.trace_xi,
            feasible: p.objective.is_some(),
            failure: p.failure.clone(),
        })
        .collect()
}

fn fit_report(fit: &FitResult<f64>, prep: &Prepared, inputs: Vec<InputHash>) -> FitReport {
    let p = fit.beta_hat.len();
    let forcings = (0..p)
        .map(|i| ForcingReport {
            index: i,
            beta_hat: fit.beta_hat[i],
            xi_hat_ii: fit.xi_hat[(i, i)],
            ci_lower: fit.intervals[i].0,
            ci_upper: fit.intervals[i].1,
            detected: fit.verdicts[i].detected,
            attributed: fit.verdicts[i].attributed,
        })
        .collect();
    let ones = DVector::from_element(p, 1.0);
    let joint_region = fit.joint_test(&ones).ok().map(|t| JointReport {
        beta0: ones.iter().copied().collect(),
        statistic: t.statistic,
        threshold: t.threshold,
        inside: t.inside,
    });
    FitReport {
        n_dim: fit.n_dim,
        m_runs: fit.m_runs,
        alpha: fit.alpha,
        lambda_opt: fit.lambda_opt,
        beta_hat: fit.beta_hat.iter().copied().collect(),
        xi_hat: fit.xi_hat.row_iter().map(|r| r.iter().copied().collect()).collect(),
        forcings,
        joint_region,
        diagnostics: Diagnostics {
            tau_bar: fit.tau_bar,
            denominator: fit.estimate.denominator,
            k_hat: fit.estimate.k_hat,
            tls_min_eigenvalue: fit.estimate.tls_min_eigenvalue,
            tls_near_degenerate: fit.estimate.tls_near_degenerate,
            warnings: fit.warnings.clone(),
        },
        lambda_curve: curve_rows(&fit.curve),
        provenance: Provenance {
            version: env!("CARGO_PKG_VERSION"),
            inputs,
            grid: GridSpec {
                lower: prep.bounds.0,
                upper: prep.bounds.1,
                size: fit.curve.points.len(),
                spacing: "log",
                criterion: "trace",
            },
        },
    }
}

fn human_table(fit: &FitResult<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "lambda_opt = {:.6e}", fit.lambda_opt);
    let _ = writeln!(out, "{:>7} {:>10} {:>10} {:>10} {:>8} {:>10}", "forcing", "beta_hat", "ci_lower", "ci_upper", "detected", "attributed");
    for (i, ((lo, hi), v)) in fit.intervals.iter().zip(&fit.verdicts).enumerate() {
        let _ = writeln!(
            out,
            "{:>7} {:>10.4} {:>10.4} {:>10.4} {:>8} {:>10}",
            i, fit.beta_hat[i], lo, hi, v.detected, v.attributed
        );
    }
    out
}

fn cmd_fit(manifest: &Path, grid: &GridArgs, output: Option<&Path>) -> CliResult<()> {
    let loaded = load(manifest)?;
    let prep = prepare(&loaded.dataset, grid)?;
    let options = FitOptions {
        alpha: grid.alpha,
        lambda_bounds: Some(prep.bounds),
        grid_size: grid.grid_size,
        criterion: SelectionCriterion::Trace,
    };
    let fit = fit_with_cache(&prep.cache, &prep.sizes, &options, prep.warnings.clone())?;
    let report = fit_report(&fit, &prep, loaded.inputs);
    let mut body = serde_json::to_string_pretty(&report).expect("report serializes");
    body.push('\n');
    write_output(output, &body)?;
    if output.is_some() {
        print!("{}", human_table(&fit));
    }
    Ok(())
}

fn cmd_lambda_curve(manifest: &Path, grid: &GridArgs, output: Option<&Path>) -> CliResult<()> {
    let loaded = load(manifest)?;
    let prep = prepare(&loaded.dataset, grid)?;
    let curve = select_lambda(
        &prep.cache,
        &prep.sizes,
        prep.bounds,
        grid.grid_size,
        SelectionCriterion::Trace,
    )?;
    let mut body = String::from("lambda,trace_xi\n");
    for p in &curve.points {
        match p.objective {
            Some(t) => writeln!(body, "{:e},{:e}", p.lambda, t),
            None => writeln!(body, "{:e},nan", p.lambda),
        }
        .expect("writing to a string");
    }
    writeln!(body, "# chosen_lambda={:e}", curve.lambda_opt()).expect("writing to a string");
    write_output(output, &body)
}

struct SimulateOverrides {
    replicates: Option<usize>,
    seed: Option<u64>,
    alpha: Option<f64>,
    grid_size: Option<usize>,
}

fn replicate_table(report: &SimulationReport, p: usize) -> String {
    let mut header = vec!["rep_index".to_string(), "status".into(), "lambda_opt".into(), "tau_bar".into()];
    for i in 0..p {
        for col in ["beta_hat", "xi_hat_ii", "ci_lower", "ci_upper", "covered"] {
            header.push(format!("{col}_{i}"));
        }
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in &report.records {
        out.push_str(&replicate_row(r, p));
        out.push('\n');
    }
    out
}

fn replicate_row(r: &ReplicateRecord, p: usize) -> String {
    let mut cells = vec![r.rep_index.to_string()];
    match &r.error {
        Some(e) => {
            cells.push(format!("\"failed: {}\"", e.replace('"', "'")));
            cells.extend(std::iter::repeat_n(String::new(), 2 + 5 * p));
        }
        None => {
            cells.push("ok".into());
            cells.push(format!("{:e}", r.lambda_opt));
            cells.push(format!("{:e}", r.tau_bar));
            for i in 0..p {
                cells.push(format!("{:e}", r.beta_hat[i]));
                cells.push(format!("{:e}", r.xi_diag[i]));
                cells.push(format!("{:e}", r.intervals[i].0));
                cells.push(format!("{:e}", r.intervals[i].1));
                cells.push(r.covered[i].to_string());
            }
        }
    }
    cells.join(",")
}

fn default_table_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    output.with_file_name(format!("{stem}.replicates.csv"))
}

fn cmd_simulate(
    scenario_path: &Path,
    overrides: SimulateOverrides,
    jobs: usize,
    output: Option<&Path>,
    table: Option<&Path>,
) -> CliResult<()> {
    let mut scenario = SimulationScenario::from_path(scenario_path)?;
    if let Some(r) = overrides.replicates {
        scenario.replicates = r;
    }
    if let Some(s) = overrides.seed {
        scenario.base_seed = s;
    }
    if let Some(a) = overrides.alpha {
        scenario.alpha = a;
    }
    if let Some(g) = overrides.grid_size {
        scenario.grid_size = g;
    }
    let p = scenario.true_beta.len();
    let sim = Simulation::<f64>::new(scenario)?;
    let report = sim.run(jobs.max(1))?;
    let mut body = serde_json::to_string_pretty(&report).expect("report serializes");
    body.push('\n');
    write_output(output, &body)?;
    let table_path = table.map(Path::to_path_buf).or_else(|| output.map(default_table_path));
    if let Some(path) = table_path {
        write_output(Some(&path), &replicate_table(&report, p))?;
    }
    if report.replicates_failed > 0 {
        eprintln!(
            "finprint: {} of {} replicates failed",
            report.replicates_failed, report.replicates_requested
        );
    }
    Ok(())
}
