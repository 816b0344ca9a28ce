//! Batch pipeline: data → select → constrain → fit → simulate → static →
//! validate, writing plot-ready CSV/JSON artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, HammersteinConfig, TimeSeries};
use crate::dynamics::{self, Branch, StaticCurvePoint};
use crate::error::NarxError;
use crate::estimators::{self, AffinePair, ConstraintSet, ParetoPoint};
use crate::greybox::{self, SteadyStatePoint};
use crate::selection::{self, SelectionMethod, SelectionTrace};
use crate::structure::{generate_candidates, CandidateOptions, MetaParams, ModelStructure, PolynomialModel, Regressor, TermCluster};
use crate::validation::{self, ValidationReport};

/// Where the data come from and how they are split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; when absent the dead-zone Hammerstein benchmark is generated.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Overrides the benchmark noise level.
    #[serde(default)]
    pub noise_std: Option<f64>,
    /// Identification window `[start, end)`; default first half.
    #[serde(default)]
    pub ident: Option<[usize; 2]>,
    /// Validation window `[start, end)`; default second half.
    #[serde(default)]
    pub valid: Option<[usize; 2]>,
}

fn default_n() -> usize {
    500
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            n: default_n(),
            noise_std: None,
            ident: None,
            valid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    /// `"ny=..,nu=..,l=..,d=.."`
    pub meta: String,
    #[serde(default)]
    pub constant: bool,
    #[serde(default)]
    pub hysteresis: bool,
    /// Clusters removed from the candidate pool before selection.
    #[serde(default)]
    pub forbidden: Vec<TermCluster>,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig {
            meta: "ny=2,nu=2,l=2,d=1".into(),
            constant: false,
            hysteresis: false,
            forbidden: Vec::new(),
        }
    }
}

/// Model-size rule applied to a selection trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum StopRule {
    /// Keep all `n_max` picks.
    None,
    Aic,
    /// Smallest size whose cumulative ERR reaches `rho`.
    ErrSum { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub method: SelectionMethod,
    pub n_max: usize,
    pub stop: StopRule,
    #[serde(default)]
    pub kernel_sigma: Option<f64>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            method: SelectionMethod::Err,
            n_max: 8,
            stop: StopRule::None,
            kernel_sigma: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranscriticalSpec {
    pub u_c: f64,
    pub alpha: f64,
}

/// Auxiliary information. Constraint files must match the selected structure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    #[serde(default)]
    pub files: Vec<PathBuf>,
    #[serde(default)]
    pub transcritical: Option<TranscriticalSpec>,
    /// Hard constraints for `cls`, steady-state data for `mo`.
    #[serde(default)]
    pub static_points: Vec<SteadyStatePoint>,
    #[serde(default)]
    pub cluster_targets: Vec<(TermCluster, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// LS without constraints, CLS with.
    Auto,
    Ls,
    Cls,
    Els,
    /// Bi-objective sweep over dynamical and steady-state data, picked by `J_corr`.
    Mo,
    /// LS start refined by free-run error minimization.
    Se,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    #[serde(default = "default_grid")]
    pub lambda_grid: usize,
    #[serde(default = "default_els_iter")]
    pub els_max_iter: usize,
    #[serde(default = "default_budget")]
    pub se_budget: usize,
}

fn default_grid() -> usize {
    21
}
fn default_els_iter() -> usize {
    50
}
fn default_budget() -> usize {
    2000
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::Auto,
            lambda_grid: default_grid(),
            els_max_iter: default_els_iter(),
            se_budget: default_budget(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticConfig {
    pub u_min: f64,
    pub u_max: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JcorrData {
    Validation,
    Identification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    #[serde(default = "default_tau")]
    pub tau_max: usize,
    #[serde(default = "default_jcorr")]
    pub jcorr_on: JcorrData,
    /// Fail the run (exit 4) when a residual test fails.
    #[serde(default)]
    pub require_white: bool,
}

fn default_tau() -> usize {
    20
}
fn default_jcorr() -> JcorrData {
    JcorrData::Validation
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            tau_max: default_tau(),
            jcorr_on: default_jcorr(),
            require_white: false,
        }
    }
}

/// Full pipeline configuration; every section has defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub structure: StructureConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub constraints: ConstraintConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub static_curve: Option<StaticConfig>,
    #[serde(default)]
    pub validation: ValidationConfig,
    /// Also fit a black-box model (selection on the unpruned pool, plain LS)
    /// and report its validation RMSE.
    #[serde(default)]
    pub baseline: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("narx-out")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_dir: default_out(),
            threads: None,
            data: DataConfig::default(),
            structure: StructureConfig::default(),
            selection: SelectionConfig::default(),
            constraints: ConstraintConfig::default(),
            estimator: EstimatorConfig::default(),
            static_curve: None,
            validation: ValidationConfig::default(),
            baseline: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The dead-zone benchmark run: prune the constant and `Ω_u`, select by
    /// ERR with AIC stopping (at most 8 terms), impose a transcritical curve with breakpoint 1 and slope 7.
    pub fn dead_zone_example(seed: u64) -> Self {
        PipelineConfig {
            seed,
            data: DataConfig {
                ident: Some([100, 300]),
                valid: Some([300, 500]),
                ..DataConfig::default()
            },
            structure: StructureConfig {
                meta: "ny=2,nu=3,l=2,d=1".into(),
                constant: true,
                hysteresis: false,
                forbidden: vec![TermCluster::process(0, 0), TermCluster::process(0, 1)],
            },
            selection: SelectionConfig {
                stop: StopRule::Aic,
                ..SelectionConfig::default()
            },
            constraints: ConstraintConfig {
                transcritical: Some(TranscriticalSpec { u_c: 1.0, alpha: 7.0 }),
                ..ConstraintConfig::default()
            },
            static_curve: Some(StaticConfig {
                u_min: 0.0,
                u_max: 3.0,
                points: 61,
            }),
            baseline: true,
            ..PipelineConfig::default()
        }
    }
}

/// Failure class, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Config,
    Numerical,
    Validation,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Numerical => 3,
            FailureKind::Validation => 4,
        }
    }
}

impl From<&NarxError> for FailureKind {
    fn from(e: &NarxError) -> Self {
        if e.is_numerical() {
            FailureKind::Numerical
        } else {
            FailureKind::Config
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineError {
    pub stage: String,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    fn config(stage: &str, message: impl Into<String>) -> Self {
        PipelineError {
            stage: stage.into(),
            kind: FailureKind::Config,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for PipelineError {}

trait StageExt<T> {
    fn stage(self, name: &str) -> Result<T, PipelineError>;
}

impl<T> StageExt<T> for crate::Result<T> {
    fn stage(self, name: &str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage: name.into(),
            kind: FailureKind::from(&e),
            message: e.to_string(),
        })
    }
}

/// One written file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub path: PathBuf,
    pub bytes: usize,
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_terms: usize,
    pub constraint_rows: usize,
    pub constraint_violation: f64,
    pub validation_rmse: f64,
    pub j_corr: f64,
    pub residual_tests_pass: bool,
    #[serde(default)]
    pub baseline_rmse: Option<f64>,
    /// `(u_c, slope)` of the nonzero stable branch of the static curve.
    #[serde(default)]
    pub static_line: Option<(f64, f64)>,
    #[serde(default)]
    pub pareto_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<Artifact>,
    pub summary: RunSummary,
}

/// Everything a run produced, for library callers.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub manifest: Manifest,
    pub model: PolynomialModel,
    pub constraints: ConstraintSet,
    pub trace: SelectionTrace,
    pub report: ValidationReport,
    pub baseline: Option<PolynomialModel>,
    pub static_curve: Option<Vec<StaticCurvePoint>>,
}

struct Writer {
    dir: PathBuf,
    written: Vec<(String, PathBuf, usize)>,
}

const ARTIFACTS: [&str; 10] = [
    "data.csv",
    "trace.csv",
    "constraints.json",
    "model.json",
    "pareto.csv",
    "simulation.csv",
    "static_curve.csv",
    "report.json",
    "baseline_model.json",
    "manifest.json",
];

impl Writer {
    fn new(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir)
            .map_err(|e| PipelineError::config("output", format!("cannot create {}: {e}", dir.display())))?;
        for name in ARTIFACTS {
            for p in [dir.join(name), dir.join(format!("{name}.partial"))] {
                if p.exists() {
                    fs::remove_file(&p)
                        .map_err(|e| PipelineError::config("output", format!("cannot remove {}: {e}", p.display())))?;
                }
            }
        }
        Ok(Writer {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Writes `name.partial`; [`Writer::commit`] renames everything at the end.
    fn put(&mut self, name: &str, content: &str) -> Result<(), PipelineError> {
        let path = self.dir.join(format!("{name}.partial"));
        fs::write(&path, content)
            .map_err(|e| PipelineError::config("output", format!("cannot write {}: {e}", path.display())))?;
        self.written.push((name.to_string(), path, content.len()));
        Ok(())
    }

    fn commit(self) -> Result<Vec<Artifact>, PipelineError> {
        let mut out = Vec::new();
        for (name, partial, bytes) in self.written {
            let path = self.dir.join(&name);
            fs::rename(&partial, &path)
                .map_err(|e| PipelineError::config("output", format!("cannot finalize {}: {e}", path.display())))?;
            out.push(Artifact { name, path, bytes });
        }
        Ok(out)
    }
}

fn window(ts: &TimeSeries, w: Option<[usize; 2]>, default: std::ops::Range<usize>, stage: &str) -> Result<TimeSeries, PipelineError> {
    let r = w.map(|[a, b]| a..b).unwrap_or(default);
    ts.slice(r).stage(stage)
}

fn load_data(cfg: &PipelineConfig) -> Result<TimeSeries, PipelineError> {
    match &cfg.data.path {
        Some(p) => {
            if !p.exists() {
                return Err(PipelineError::config("data", format!("data file {} does not exist", p.display())));
            }
            dataset::load_csv(p).stage("data")
        }
        None => {
            let mut gen = HammersteinConfig::default();
            if let Some(s) = cfg.data.noise_std {
                gen.noise_std = s;
            }
            gen.generate(cfg.seed, cfg.data.n).stage("data")
        }
    }
}

/// Applies a stop rule to a trace and returns the chosen size.
pub fn apply_stop(trace: &SelectionTrace, rule: StopRule) -> crate::Result<usize> {
    match rule {
        StopRule::None => Ok(trace.steps.len()),
        StopRule::Aic => selection::aic_stop(trace, trace.n_rows),
        StopRule::ErrSum { rho } => Ok(selection::err_threshold_stop(trace, rho)),
    }
}

/// Runs one selection method.
pub fn run_selection(ts: &TimeSeries, candidates: &[Regressor], cfg: &SelectionConfig) -> crate::Result<SelectionTrace> {
    let mut trace = match cfg.method {
        SelectionMethod::Err => selection::frols_err(ts, candidates, cfg.n_max)?,
        SelectionMethod::Srr => selection::srr_select(ts, candidates, cfg.n_max)?,
        SelectionMethod::Ssmr => selection::ssmr_select(ts, candidates, cfg.n_max, cfg.kernel_sigma)?,
    };
    trace.stop_index = apply_stop(&trace, cfg.stop)?;
    Ok(trace)
}

/// Builds the configured constraint set for `structure`.
pub fn build_constraints(structure: &ModelStructure, cfg: &ConstraintConfig, for_mo: bool) -> crate::Result<ConstraintSet> {
    let mut cons = ConstraintSet::empty(structure.len());
    for f in &cfg.files {
        let text = fs::read_to_string(f).map_err(|source| NarxError::Io {
            path: f.clone(),
            source,
        })?;
        cons = cons.stacked(&ConstraintSet::from_json(&text, structure.len())?)?;
    }
    if let Some(t) = cfg.transcritical {
        cons = cons.stacked(&greybox::constraints_transcritical(structure, t.u_c, t.alpha)?)?;
    }
    if !cfg.static_points.is_empty() && !for_mo {
        cons = cons.stacked(&greybox::constraints_from_static_points(structure, &cfg.static_points)?)?;
    }
    if !cfg.cluster_targets.is_empty() {
        let targets: BTreeMap<TermCluster, f64> = cfg.cluster_targets.iter().copied().collect();
        cons = cons.stacked(&greybox::constraints_from_cluster_targets(structure, &targets)?)?;
    }
    Ok(cons)
}

fn noise_extended(structure: &ModelStructure, ne: usize) -> crate::Result<ModelStructure> {
    let mut s = structure.clone();
    for lag in 1..=ne {
        s = s.with_regressor(Regressor::e(lag))?;
    }
    Ok(s)
}

/// Stable fixed points of a static curve as CSV `u_bar,y_bar,stable,class`.
pub fn static_curve_csv(curve: &[StaticCurvePoint]) -> String {
    let mut out = String::from("u_bar,y_bar,stable,class\n");
    for p in curve {
        for fp in &p.fixed_points {
            let class = fp.class.map(|c| format!("{c:?}").to_lowercase()).unwrap_or_default();
            let _ = writeln!(out, "{:?},{:?},{},{}", p.u_bar, fp.scalar(), fp.is_stable(), class);
        }
    }
    out
}

/// Line through the stable fixed points with `|ȳ| > tol`: returns the
/// input where it crosses zero and its slope, or `None` with fewer than two
/// such points.
pub fn static_line(curve: &[StaticCurvePoint], tol: f64) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .flat_map(|p| {
            p.fixed_points
                .iter()
                .filter(|f| f.is_stable() && f.scalar().abs() > tol)
                .map(move |f| (p.u_bar, f.scalar()))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mu, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mu) * (p.0 - mu)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = pts.iter().map(|p| (p.0 - mu) * (p.1 - my)).sum::<f64>() / sxx;
    if slope == 0.0 {
        return None;
    }
    Some((mu - my / slope, slope))
}

fn simulation_csv(ts: &TimeSeries, y_sim: &[f64]) -> String {
    let mut out = String::from("k,u,y,y_sim\n");
    for (k, ((u, y), s)) in ts.u().iter().zip(ts.y()).zip(y_sim).enumerate() {
        let _ = writeln!(out, "{k},{u:?},{y:?},{s:?}");
    }
    out
}

fn pareto_csv(points: &[ParetoPoint], j_corr: &[f64]) -> String {
    let mut out = String::from("lambda,j_dyn,j_ss,j_corr\n");
    for (p, j) in points.iter().zip(j_corr) {
        let _ = writeln!(out, "{:?},{:?},{:?},{:?}", p.lambda, p.j_dyn, p.j_ss, j);
    }
    out
}

/// Executes the configured stages in order. Artifacts are written as
/// `*.partial` and renamed only when every stage succeeds.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    match cfg.threads {
        Some(0) => return Err(PipelineError::config("config", "threads must be at least 1")),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| PipelineError::config("config", e.to_string()))?
            .install(|| run_stages(cfg)),
        None => run_stages(cfg),
    }
}

fn run_stages(cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    for f in &cfg.constraints.files {
        if !f.exists() {
            return Err(PipelineError::config("config", format!("constraint file {} does not exist", f.display())));
        }
    }
    let meta = MetaParams::parse(&cfg.structure.meta).stage("config")?;
    let mut out = Writer::new(&cfg.output_dir)?;

    // data
    let data = load_data(cfg)?;
    out.put("data.csv", &dataset::to_csv_string(&data))?;
    let n = data.len();
    let ident = window(&data, cfg.data.ident, 0..n / 2, "data")?;
    let valid = window(&data, cfg.data.valid, n / 2..n, "data")?;

    // select
    let opts = CandidateOptions {
        constant: cfg.structure.constant,
        hysteresis: cfg.structure.hysteresis,
        ..CandidateOptions::default()
    };
    let pool = generate_candidates(&meta, opts);
    let (candidates, _) = greybox::prune_clusters(&pool, &cfg.structure.forbidden).stage("select")?;
    let trace = run_selection(&ident, &candidates, &cfg.selection).stage("select")?;
    out.put("trace.csv", &trace.to_csv())?;
    let mut regressors = trace.regressors(trace.stop_index);
    if cfg.constraints.transcritical.is_some() {
        // Longest prefix of the trace that still fits n_max once the
        // transcritical clusters are completed.
        let mut k = trace.stop_index;
        loop {
            let done = greybox::complete_clusters(&trace.regressors(k), &candidates, &greybox::TRANSCRITICAL_CLUSTERS)
                .stage("select")?;
            if done.len() <= cfg.selection.n_max.max(greybox::TRANSCRITICAL_CLUSTERS.len()) || k == 0 {
                regressors = done;
                break;
            }
            k -= 1;
        }
    }
    let structure = ModelStructure::new(meta, regressors).stage("select")?;

    // constrain
    let mo = cfg.estimator.kind == EstimatorKind::Mo;
    let cons = build_constraints(&structure, &cfg.constraints, mo).stage("constrain")?;
    out.put("constraints.json", &cons.to_json().stage("constrain")?)?;

    // fit
    let prob = estimators::build_regression(&ident, &structure, None).stage("fit")?;
    let mut pareto_lambda = None;
    let theta = match cfg.estimator.kind {
        EstimatorKind::Auto | EstimatorKind::Cls if !cons.is_empty() => {
            estimators::constrained_least_squares(&prob, &cons).stage("fit")?
        }
        EstimatorKind::Cls | EstimatorKind::Auto | EstimatorKind::Ls => estimators::least_squares(&prob).stage("fit")?,
        EstimatorKind::Els => {
            if meta.ne == 0 {
                return Err(PipelineError::config("fit", "els needs ne >= 1 in structure.meta"));
            }
            let full = noise_extended(&structure, meta.ne).stage("fit")?;
            let fit = estimators::extended_least_squares(&ident, &full, cfg.estimator.els_max_iter, 1e-8).stage("fit")?;
            fit.model.terms().filter(|(r, _)| !r.has_noise()).map(|(_, t)| t).collect()
        }
        EstimatorKind::Se => {
            let init = if cons.is_empty() {
                estimators::least_squares(&prob)
            } else {
                estimators::constrained_least_squares(&prob, &cons)
            }
            .stage("fit")?;
            estimators::simulation_error_estimate(&ident, &structure, &init, cfg.estimator.se_budget)
                .stage("fit")?
                .theta
        }
        EstimatorKind::Mo => {
            if cfg.constraints.static_points.is_empty() {
                return Err(PipelineError::config("fit", "mo needs constraints.static_points as steady-state data"));
            }
            let dynamic = AffinePair::from_regression(&prob, 1.0);
            let steady = greybox::steady_state_pair(&structure, &cfg.constraints.static_points, 1.0).stage("fit")?;
            let sweep = estimators::pareto_sweep(&dynamic, &steady, &estimators::lambda_grid(cfg.estimator.lambda_grid))
                .stage("pareto")?;
            let jcorr_ts = match cfg.validation.jcorr_on {
                JcorrData::Validation => &valid,
                JcorrData::Identification => &ident,
            };
            let pick = validation::pick_from_pareto(&sweep.points, &structure, jcorr_ts).stage("pareto")?;
            out.put("pareto.csv", &pareto_csv(&sweep.points, &pick.j_corr))?;
            pareto_lambda = Some(pick.point.lambda);
            pick.point.theta
        }
    };
    let model = PolynomialModel::new(structure, theta).stage("fit")?;
    out.put("model.json", &model.to_json().stage("fit")?)?;

    // simulate
    let report = validation::validate(&model, &valid, cfg.validation.tau_max).stage("simulate")?;
    out.put("simulation.csv", &simulation_csv(&valid, &report.y_free))?;

    // static
    let mut static_curve = None;
    let mut line = None;
    if let Some(sc) = cfg.static_curve {
        if sc.points < 2 || !(sc.u_max > sc.u_min) {
            return Err(PipelineError::config("static", "static curve needs points >= 2 and u_max > u_min"));
        }
        let grid: Vec<f64> = (0..sc.points)
            .map(|i| sc.u_min + (sc.u_max - sc.u_min) * i as f64 / (sc.points - 1) as f64)
            .collect();
        let curve = dynamics::static_curve(&model, &grid, Branch::Loading).stage("static")?;
        out.put("static_curve.csv", &static_curve_csv(&curve))?;
        line = static_line(&curve, 1e-6);
        static_curve = Some(curve);
    }

    // validate
    let j_corr = match cfg.validation.jcorr_on {
        JcorrData::Validation => report.j_corr,
        JcorrData::Identification => validation::j_corr(&model, &ident),
    };
    out.put("report.json", &serde_json::to_string_pretty(&report).map_err(|e| PipelineError::config("validate", e.to_string()))?)?;
    let baseline = if cfg.baseline {
        let trace = run_selection(&ident, &pool, &cfg.selection).stage("baseline")?;
        let s = ModelStructure::new(meta, trace.regressors(trace.stop_index)).stage("baseline")?;
        let p = estimators::build_regression(&ident, &s, None).stage("baseline")?;
        let m = PolynomialModel::new(s, estimators::least_squares(&p).stage("baseline")?).stage("baseline")?;
        out.put("baseline_model.json", &m.to_json().stage("baseline")?)?;
        Some(m)
    } else {
        None
    };
    let baseline_rmse = match &baseline {
        Some(m) => Some(validation::validate(m, &valid, cfg.validation.tau_max).map(|r| r.rmse).unwrap_or(f64::INFINITY)),
        None => None,
    };

    let summary = RunSummary {
        n_terms: model.structure().len(),
        constraint_rows: cons.len(),
        constraint_violation: cons.violation(model.theta()),
        validation_rmse: report.rmse,
        j_corr,
        residual_tests_pass: report.all_tests_pass(),
        baseline_rmse,
        static_line: line,
        pareto_lambda,
    };
    if cfg.validation.require_white && !summary.residual_tests_pass {
        let failed: Vec<&str> = report
            .residual_tests
            .iter()
            .filter(|t| !t.pass)
            .map(|t| t.kind.name())
            .collect();
        return Err(PipelineError {
            stage: "validate".into(),
            kind: FailureKind::Validation,
            message: format!("residual tests failed: {}", failed.join(", ")),
        });
    }
    let mut artifacts = out.commit()?;
    let manifest_path = cfg.output_dir.join("manifest.json");
    let manifest = Manifest {
        artifacts: artifacts.clone(),
        summary,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| PipelineError::config("output", e.to_string()))?;
    fs::write(&manifest_path, &text)
        .map_err(|e| PipelineError::config("output", format!("cannot write {}: {e}", manifest_path.display())))?;
    artifacts.push(Artifact {
        name: "manifest.json".into(),
        path: manifest_path,
        bytes: text.len(),
    });
    Ok(PipelineRun {
        manifest: Manifest {
            artifacts,
            summary: manifest.summary,
        },
        model,
        constraints: cons,
        trace,
        report,
        baseline,
        static_curve,
    })
}
