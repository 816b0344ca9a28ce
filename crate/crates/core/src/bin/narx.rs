use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use narx_core::dataset::{self, HammersteinConfig, SplitSpec};
use narx_core::dynamics::{self, Branch, PlanarStructure};
use narx_core::estimators::{self, AffinePair, ConstraintSet};
use narx_core::greybox::{self, RationalTemplate, SteadyStatePoint};
use narx_core::pipeline::{self, FailureKind, PipelineConfig, StopRule};
use narx_core::selection::SelectionMethod;
use narx_core::structure::{generate_candidates, CandidateOptions, MetaParams, ModelStructure, PolynomialModel, TermCluster};
use narx_core::validation;
use narx_core::NarxError;

#[derive(Parser)]
#[command(name = "narx", version, about = "Polynomial NARX identification with grey-box constraints")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Data generation and preparation.
    #[command(subcommand)]
    Data(DataCmd),
    /// Forward structure selection; writes the trace CSV.
    Select(SelectArgs),
    /// Build a constraint set `c = S θ` as JSON.
    #[command(subcommand)]
    Constrain(ConstrainCmd),
    /// Estimate parameters for a structure.
    Fit(FitArgs),
    /// Free-run simulation of a model.
    Simulate(SimulateArgs),
    /// Static curve with fixed-point classification.
    Static(StaticArgs),
    /// Loading/unloading branches of a hysteretic model.
    Hysteresis(HysteresisArgs),
    /// Free-run metrics and residual tests on a data set.
    Validate(ValidateArgs),
    /// Bi-objective Pareto sweep, picked by the correlation criterion.
    Pareto(ParetoArgs),
    /// Run the configured end-to-end pipeline.
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Dead-zone Hammerstein benchmark.
    GenHammerstein {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        noise_std: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Covariance analysis of y and the recommended decimation factor.
    Decimate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        tau_max: Option<usize>,
        /// Use this factor instead of the recommended one.
        #[arg(long)]
        factor: Option<usize>,
        /// Write the decimated series here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Identification/validation split.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        n_ident: usize,
        #[arg(long)]
        n_valid: Option<usize>,
        #[arg(long)]
        out_ident: PathBuf,
        #[arg(long)]
        out_valid: PathBuf,
    },
    /// Number of frequency bins of u above a power fraction.
    Excitation {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Err,
    Srr,
    Ssmr,
}

impl From<Method> for SelectionMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Err => SelectionMethod::Err,
            Method::Srr => SelectionMethod::Srr,
            Method::Ssmr => SelectionMethod::Ssmr,
        }
    }
}

#[derive(Args)]
struct SelectArgs {
    method: Method,
    #[arg(long)]
    data: PathBuf,
    /// e.g. "ny=3,nu=3,l=3,d=1"
    #[arg(long)]
    meta: String,
    #[arg(long, default_value_t = 10)]
    n_max: usize,
    /// `aic`, `none` or `err:<rho>`
    #[arg(long, default_value = "aic")]
    stop: String,
    #[arg(long)]
    constant: bool,
    #[arg(long)]
    hysteresis: bool,
    /// Cluster `p:m` removed from the pool (repeatable).
    #[arg(long = "forbid", value_parser = parse_cluster)]
    forbid: Vec<TermCluster>,
    #[arg(long)]
    kernel_sigma: Option<f64>,
    /// Trace CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Selected structure JSON.
    #[arg(long)]
    structure_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ConstrainCmd {
    /// Steady-state points `u,y[,unloading]`.
    StaticPoints {
        #[arg(long)]
        structure: PathBuf,
        #[arg(long = "point", value_parser = parse_point, required = true)]
        points: Vec<SteadyStatePoint>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster coefficient targets `p:m=value`.
    Clusters {
        #[arg(long)]
        structure: PathBuf,
        #[arg(long = "target", value_parser = parse_target, required = true)]
        targets: Vec<(TermCluster, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a rational static template to steady-state data, then constrain
    /// the fitted cluster coefficients.
    StaticFit {
        #[arg(long)]
        structure: PathBuf,
        /// JSON list of `{u_bar, y_bar}`.
        #[arg(long)]
        points: PathBuf,
        #[arg(long = "numerator", value_parser = parse_cluster, required = true)]
        numerator: Vec<TermCluster>,
        #[arg(long = "denominator", value_parser = parse_cluster)]
        denominator: Vec<TermCluster>,
        /// Known cluster value `p:m=value` held fixed in the fit.
        #[arg(long = "pin", value_parser = parse_target)]
        pin: Vec<(TermCluster, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transcritical static curve with breakpoint `u_c` and slope `alpha`.
    Transcritical {
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        u_c: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed point `y1,y2` of a planar map.
    FixedPoint {
        /// Planar structure JSON `{eq1: [...], eq2: [...]}`.
        #[arg(long)]
        planar: PathBuf,
        #[arg(long, value_parser = parse_pair)]
        target: (f64, f64),
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMethod {
    Ls,
    Wls,
    Cls,
    Els,
    Mo,
    Se,
}

#[derive(Args)]
struct FitArgs {
    method: FitMethod,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    structure: PathBuf,
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// WLS forgetting factor in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    forgetting: f64,
    /// Steady-state data (JSON list of points) for `mo`.
    #[arg(long)]
    steady: Option<PathBuf>,
    /// Weight of the dynamical objective for `mo`.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 2000)]
    budget: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV with a `u` column (or `u` in the first column).
    #[arg(long)]
    input: PathBuf,
    /// Initial outputs, comma separated.
    #[arg(long, default_value = "")]
    init: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Loading,
    Unloading,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Loading => Branch::Loading,
            BranchArg::Unloading => Branch::Unloading,
        }
    }
}

#[derive(Args)]
struct StaticArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    u_min: f64,
    #[arg(long)]
    u_max: f64,
    #[arg(long, default_value_t = 200)]
    points: usize,
    #[arg(long, value_enum, default_value_t = BranchArg::Loading)]
    branch: BranchArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HysteresisArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    u_min: f64,
    #[arg(long, default_value_t = 1.0)]
    u_max: f64,
    #[arg(long, default_value_t = 200)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 25)]
    tau_max: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Exit with status 4 when a residual test fails.
    #[arg(long)]
    require_white: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum JcorrOn {
    Validation,
    Identification,
}

#[derive(Args)]
struct ParetoArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    structure: PathBuf,
    /// Steady-state data, JSON list of points.
    #[arg(long)]
    steady: PathBuf,
    #[arg(long, default_value_t = 21)]
    lambda_grid: usize,
    /// Data for the correlation criterion (default: `--data`).
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = JcorrOn::Validation)]
    jcorr_on: JcorrOn,
    #[arg(long)]
    out: PathBuf,
    /// Picked model JSON.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Example {
    DeadZone,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a built-in configuration instead of the defaults.
    #[arg(long, value_enum)]
    example: Option<Example>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    meta: Option<String>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    lambda_grid: Option<usize>,
    #[arg(long)]
    tau_max: Option<usize>,
    #[arg(long, value_enum)]
    jcorr_on: Option<JcorrOn>,
}

struct Failure {
    kind: FailureKind,
    message: String,
}

impl From<NarxError> for Failure {
    fn from(e: NarxError) -> Self {
        Failure {
            kind: FailureKind::from(&e),
            message: e.to_string(),
        }
    }
}

fn config_err(message: impl Into<String>) -> Failure {
    Failure {
        kind: FailureKind::Config,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn parse_cluster(s: &str) -> Result<TermCluster, String> {
    let (p, m) = s.split_once(':').ok_or_else(|| format!("expected p:m, got {s:?}"))?;
    let p = p.trim().parse().map_err(|_| format!("bad output exponent in {s:?}"))?;
    let m = m.trim().parse().map_err(|_| format!("bad input exponent in {s:?}"))?;
    Ok(TermCluster::process(p, m))
}

fn parse_target(s: &str) -> Result<(TermCluster, f64), String> {
    let (c, v) = s.split_once('=').ok_or_else(|| format!("expected p:m=value, got {s:?}"))?;
    Ok((parse_cluster(c)?, v.trim().parse().map_err(|_| format!("bad value in {s:?}"))?))
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let v = parse_list(s)?;
    match v[..] {
        [a, b] => Ok((a, b)),
        _ => Err(format!("expected two numbers, got {s:?}")),
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number {t:?}")))
        .collect()
}

fn parse_point(s: &str) -> Result<SteadyStatePoint, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() < 2 || parts.len() > 3 {
        return Err(format!("expected u,y[,loading|unloading], got {s:?}"));
    }
    let u: f64 = parts[0].parse().map_err(|_| format!("bad u in {s:?}"))?;
    let y: f64 = parts[1].parse().map_err(|_| format!("bad y in {s:?}"))?;
    let branch = match parts.get(2) {
        None | Some(&"loading") => Branch::Loading,
        Some(&"unloading") => Branch::Unloading,
        Some(other) => return Err(format!("unknown branch {other:?}")),
    };
    Ok(SteadyStatePoint::new(u, y).on(branch))
}

fn parse_stop(s: &str) -> Result<StopRule, Failure> {
    match s {
        "aic" => Ok(StopRule::Aic),
        "none" => Ok(StopRule::None),
        _ => match s.strip_prefix("err:").map(str::parse::<f64>) {
            Some(Ok(rho)) => Ok(StopRule::ErrSum { rho }),
            _ => Err(config_err(format!("unknown stop rule {s:?}; use aic, none or err:<rho>"))),
        },
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| config_err(e.to_string()))?;
    write_text(path, &text)
}

fn load_data(path: &Path) -> Result<dataset::TimeSeries, Failure> {
    if !path.exists() {
        return Err(config_err(format!("data file {} does not exist", path.display())));
    }
    Ok(dataset::load_csv(path)?)
}

/// Input column of a CSV: the `u` column if there is a header naming it,
/// otherwise the first column.
fn read_input(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut col = 0;
    let mut u = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if i == 0 {
            if let Some(j) = rec.iter().position(|f| f.eq_ignore_ascii_case("u")) {
                col = j;
                continue;
            }
        }
        let field = rec.get(col).unwrap_or("");
        if field.is_empty() {
            continue;
        }
        u.push(field.parse().map_err(|_| config_err(format!("{}: row {}: bad number {field:?}", path.display(), i + 1)))?);
    }
    Ok(u)
}

fn load_model(path: &Path) -> Result<PolynomialModel, Failure> {
    Ok(PolynomialModel::from_json(&read_text(path)?).map_err(|e| config_err(format!("{}: {e}", path.display())))?)
}

fn load_structure(path: &Path) -> Result<ModelStructure, Failure> {
    read_json(path)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Data(c) => data(c),
        Command::Select(a) => select(a),
        Command::Constrain(c) => constrain(c),
        Command::Fit(a) => fit(a),
        Command::Simulate(a) => simulate(a),
        Command::Static(a) => static_curve(a),
        Command::Hysteresis(a) => hysteresis(a),
        Command::Validate(a) => validate(a),
        Command::Pareto(a) => pareto(a),
        Command::Pipeline(a) => run_pipeline(a, cli.threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.kind.exit_code() as u8)
        }
    }
}

fn data(cmd: DataCmd) -> CmdResult {
    match cmd {
        DataCmd::GenHammerstein { seed, n, noise_std, out } => {
            let mut cfg = HammersteinConfig::default();
            if let Some(s) = noise_std {
                cfg.noise_std = s;
            }
            dataset::save_csv(&cfg.generate(seed, n)?, &out)?;
            println!("wrote {} samples to {}", n, out.display());
        }
        DataCmd::Decimate { input, tau_max, factor, out } => {
            let ts = load_data(&input)?;
            let tau_max = tau_max.unwrap_or_else(|| dataset::default_tau_max(ts.len()));
            let report = dataset::covariance_analysis(ts.y(), tau_max)?;
            let choice = report.tau_m_star.map(dataset::choose_decimation);
            println!(
                "{}",
                serde_json::json!({
                    "tau_lin": report.tau_lin,
                    "tau_nl": report.tau_nl,
                    "tau_m_star": report.tau_m_star,
                    "degenerate": report.degenerate,
                    "factor": choice.as_ref().map(|c| c.factor),
                    "tau_m": choice.as_ref().map(|c| c.tau_m),
                    "relaxed": choice.as_ref().map(|c| c.relaxed),
                })
            );
            if let Some(out) = out {
                let f = factor
                    .or(choice.map(|c| c.factor))
                    .ok_or_else(|| config_err("no covariance minimum found; pass --factor"))?;
                dataset::save_csv(&dataset::decimate(&ts, f)?, &out)?;
            }
        }
        DataCmd::Split { input, n_ident, n_valid, out_ident, out_valid } => {
            let ts = load_data(&input)?;
            let n_valid = n_valid.unwrap_or(ts.len().saturating_sub(n_ident));
            let (a, b) = dataset::split(&ts, SplitSpec { n_ident, n_valid })?;
            dataset::save_csv(&a, &out_ident)?;
            dataset::save_csv(&b, &out_valid)?;
        }
        DataCmd::Excitation { input, threshold } => {
            let ts = load_data(&input)?;
            println!("{}", dataset::excitation_summary(ts.u(), threshold)?);
        }
    }
    Ok(())
}

fn select(a: SelectArgs) -> CmdResult {
    let ts = load_data(&a.data)?;
    let meta = MetaParams::parse(&a.meta)?;
    let pool = generate_candidates(
        &meta,
        CandidateOptions {
            constant: a.constant,
            hysteresis: a.hysteresis,
            ..CandidateOptions::default()
        },
    );
    let (candidates, removed) = greybox::prune_clusters(&pool, &a.forbid)?;
    let cfg = pipeline::SelectionConfig {
        method: a.method.into(),
        n_max: a.n_max,
        stop: parse_stop(&a.stop)?,
        kernel_sigma: a.kernel_sigma,
    };
    let trace = pipeline::run_selection(&ts, &candidates, &cfg)?;
    let csv = trace.to_csv();
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    let structure = ModelStructure::new(meta, trace.regressors(trace.stop_index))?;
    if let Some(p) = &a.structure_out {
        write_json(p, &structure)?;
    }
    eprintln!(
        "{} candidates ({} pruned), {} selected",
        candidates.len(),
        removed,
        structure.len()
    );
    Ok(())
}

fn constrain(cmd: ConstrainCmd) -> CmdResult {
    let (cons, out): (ConstraintSet, PathBuf) = match cmd {
        ConstrainCmd::StaticPoints { structure, points, out } => {
            (greybox::constraints_from_static_points(&load_structure(&structure)?, &points)?, out)
        }
        ConstrainCmd::Clusters { structure, targets, out } => {
            let t: BTreeMap<TermCluster, f64> = targets.into_iter().collect();
            (greybox::constraints_from_cluster_targets(&load_structure(&structure)?, &t)?, out)
        }
        ConstrainCmd::StaticFit { structure, points, numerator, denominator, pin, out } => {
            let s = load_structure(&structure)?;
            let pts: Vec<SteadyStatePoint> = read_json(&points)?;
            let template = RationalTemplate::new(numerator, denominator)?;
            let fit = greybox::fit_static_targets(&template, &pts, &pin.into_iter().collect())?;
            for (c, v) in &fit.targets {
                eprintln!("{c} = {v:.6}");
            }
            (greybox::constraints_from_cluster_targets(&s, &fit.targets)?, out)
        }
        ConstrainCmd::Transcritical { structure, u_c, alpha, out } => {
            (greybox::constraints_transcritical(&load_structure(&structure)?, u_c, alpha)?, out)
        }
        ConstrainCmd::FixedPoint { planar, target, out } => {
            let p: PlanarStructure = read_json(&planar)?;
            (greybox::constraints_fixed_point(&p, [target.0, target.1])?, out)
        }
    };
    write_text(&out, &cons.to_json()?)?;
    eprintln!("{} constraint rows", cons.len());
    Ok(())
}

fn fit(a: FitArgs) -> CmdResult {
    let ts = load_data(&a.data)?;
    let structure = load_structure(&a.structure)?;
    let prob = || estimators::build_regression(&ts, &structure, None);
    let theta = match a.method {
        FitMethod::Ls => estimators::least_squares(&prob()?)?,
        FitMethod::Wls => {
            let p = prob()?;
            estimators::weighted_least_squares(&p, &estimators::forgetting_weights(a.forgetting, p.rows()))?
        }
        FitMethod::Cls => {
            let path = a.constraints.as_ref().ok_or_else(|| config_err("cls needs --constraints"))?;
            let cons = ConstraintSet::from_json(&read_text(path)?, structure.len())?;
            estimators::constrained_least_squares(&prob()?, &cons)?
        }
        FitMethod::Els => {
            let fit = estimators::extended_least_squares(&ts, &structure, a.max_iter, a.tol)?;
            if !fit.converged {
                eprintln!("warning: extended least squares stopped after {} iterations", fit.iterations);
            }
            fit.model.theta().to_vec()
        }
        FitMethod::Mo => {
            let path = a.steady.as_ref().ok_or_else(|| config_err("mo needs --steady"))?;
            let pts: Vec<SteadyStatePoint> = read_json(path)?;
            if !(0.0..=1.0).contains(&a.lambda) {
                return Err(config_err("--lambda must lie in [0, 1]"));
            }
            let dynamic = AffinePair::from_regression(&prob()?, a.lambda);
            let steady = greybox::steady_state_pair(&structure, &pts, 1.0 - a.lambda)?;
            estimators::multiobjective_estimate(&[dynamic, steady])?
        }
        FitMethod::Se => {
            let init = estimators::least_squares(&prob()?)?;
            let fit = estimators::simulation_error_estimate(&ts, &structure, &init, a.budget)?;
            eprintln!("msse {:.6e} -> {:.6e} in {} evaluations", fit.initial_msse, fit.msse, fit.evaluations);
            fit.theta
        }
    };
    let model = PolynomialModel::new(structure, theta)?;
    write_text(&a.out, &model.to_json()?)?;
    println!("{}", model.render());
    Ok(())
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let u = read_input(&a.input)?;
    let init = parse_list(&a.init).map_err(config_err)?;
    let run = dynamics::simulate_free_run(&model, &u, &init)?;
    let mut csv = String::from("k,u,y_sim\n");
    for (k, (u, y)) in u.iter().zip(&run.y).enumerate() {
        let _ = writeln!(csv, "{k},{u:?},{y:?}");
    }
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(k) = run.diverged_at {
        return Err(Failure {
            kind: FailureKind::Numerical,
            message: format!("free run diverged at sample {k}"),
        });
    }
    Ok(())
}

fn static_curve(a: StaticArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    if a.points < 2 || !(a.u_max > a.u_min) {
        return Err(config_err("need --points >= 2 and --u-max > --u-min"));
    }
    let grid: Vec<f64> = (0..a.points)
        .map(|i| a.u_min + (a.u_max - a.u_min) * i as f64 / (a.points - 1) as f64)
        .collect();
    let curve = dynamics::static_curve(&model, &grid, a.branch.into())?;
    write_text(&a.out, &pipeline::static_curve_csv(&curve))?;
    Ok(())
}

fn hysteresis(a: HysteresisArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    if a.points < 2 || !(a.u_max > a.u_min) {
        return Err(config_err("need --points >= 2 and --u-max > --u-min"));
    }
    let br = dynamics::hysteresis_branches(&model)?;
    let mut csv = String::from("u_bar,loading,unloading\n");
    for i in 0..a.points {
        let u = a.u_min + (a.u_max - a.u_min) * i as f64 / (a.points - 1) as f64;
        let _ = writeln!(csv, "{u:?},{:?},{:?}", br.loading.eval(u), br.unloading.eval(u));
    }
    write_text(&a.out, &csv)?;
    println!("loop area {:.6e}", dynamics::loop_area(&br, a.u_min, a.u_max, a.points));
    Ok(())
}

fn validate(a: ValidateArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let ts = load_data(&a.data)?;
    let report = validation::validate(&model, &ts, a.tau_max)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    println!("rmse {:.6e}", report.rmse);
    match report.mape {
        Some(m) => println!("mape {m:.4}%"),
        None => println!("mape undefined (zero sample in y)"),
    }
    println!("ms1pe {:.6e}\nmsse {:.6e}\nj_corr {:.6e}", report.ms1pe, report.msse, report.j_corr);
    for t in &report.residual_tests {
        println!(
            "{:<12} {} ({} of {} lags outside, {} allowed)",
            t.kind.name(),
            if t.pass { "pass" } else { "FAIL" },
            t.outside,
            t.lags.len(),
            t.allowed_outside
        );
    }
    if a.require_white && !report.all_tests_pass() {
        return Err(Failure {
            kind: FailureKind::Validation,
            message: "residual tests failed".into(),
        });
    }
    Ok(())
}

fn pareto(a: ParetoArgs) -> CmdResult {
    let ts = load_data(&a.data)?;
    let structure = load_structure(&a.structure)?;
    let pts: Vec<SteadyStatePoint> = read_json(&a.steady)?;
    let dynamic = AffinePair::from_regression(&estimators::build_regression(&ts, &structure, None)?, 1.0);
    let steady = greybox::steady_state_pair(&structure, &pts, 1.0)?;
    let sweep = estimators::pareto_sweep(&dynamic, &steady, &estimators::lambda_grid(a.lambda_grid))?;
    for (l, why) in &sweep.skipped {
        eprintln!("skipped lambda {l}: {why}");
    }
    let valid = match (&a.valid, a.jcorr_on) {
        (Some(p), JcorrOn::Validation) => load_data(p)?,
        _ => ts.clone(),
    };
    let pick = validation::pick_from_pareto(&sweep.points, &structure, &valid)?;
    let mut csv = String::from("lambda,j_dyn,j_ss,j_corr\n");
    for (p, j) in sweep.points.iter().zip(&pick.j_corr) {
        let _ = writeln!(csv, "{:?},{:?},{:?},{:?}", p.lambda, p.j_dyn, p.j_ss, j);
    }
    write_text(&a.out, &csv)?;
    println!("picked lambda {} (j_corr {:.6e})", pick.point.lambda, pick.j_corr[pick.index]);
    if let Some(p) = &a.model_out {
        write_text(p, &PolynomialModel::new(structure, pick.point.theta)?.to_json()?)?;
    }
    Ok(())
}

fn run_pipeline(a: PipelineArgs, threads: Option<usize>) -> CmdResult {
    let mut cfg = match (&a.config, a.example) {
        (Some(p), _) => {
            if !p.exists() {
                return Err(config_err(format!("config file {} does not exist", p.display())));
            }
            PipelineConfig::load(p).map_err(|e| config_err(e.to_string()))?
        }
        (None, Some(Example::DeadZone)) => PipelineConfig::dead_zone_example(0),
        (None, None) => PipelineConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    if let Some(d) = a.data {
        cfg.data.path = Some(d);
    }
    if let Some(m) = a.meta {
        cfg.structure.meta = m;
    }
    if let Some(n) = a.n_max {
        cfg.selection.n_max = n;
    }
    if let Some(m) = a.method {
        cfg.selection.method = m.into();
    }
    if let Some(g) = a.lambda_grid {
        cfg.estimator.lambda_grid = g;
    }
    if let Some(t) = a.tau_max {
        cfg.validation.tau_max = t;
    }
    if let Some(j) = a.jcorr_on {
        cfg.validation.jcorr_on = match j {
            JcorrOn::Validation => pipeline::JcorrData::Validation,
            JcorrOn::Identification => pipeline::JcorrData::Identification,
        };
    }
    // the global pool is already sized by --threads
    if threads.is_some() {
        cfg.threads = None;
    }
    let run = pipeline::run_pipeline(&cfg).map_err(|e| Failure {
        kind: e.kind,
        message: e.to_string(),
    })?;
    for art in &run.manifest.artifacts {
        println!("{:>10}  {}", art.bytes, art.path.display());
    }
    let s = &run.manifest.summary;
    println!("terms {}  constraint violation {:.2e}  validation rmse {:.6}", s.n_terms, s.constraint_violation, s.validation_rmse);
    if let Some(b) = s.baseline_rmse {
        println!("black-box rmse {b:.6}");
    }
    if let Some((u_c, slope)) = s.static_line {
        println!("static line: breakpoint {u_c:.6}, slope {slope:.6}");
    }
    Ok(())
}
