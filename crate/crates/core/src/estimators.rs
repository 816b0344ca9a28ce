//! Parameter estimation: LS, WLS, equality-constrained LS, extended LS for
//! moving-average noise terms, affine-information multi-objective estimation
//! with its Pareto sweep, and a free-run (simulation-error) refinement.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeries;
use crate::dynamics::{free_run_msse, SimOptions};
use crate::error::{NarxError, Result};
use crate::linalg::{self, ConstraintNullSpace, PivotedQr};
use crate::optim::nelder_mead;
use crate::structure::{sign, ModelStructure, PolynomialModel, VarKind};

/// Value of `kind(k - lag)` read from measured signals.
pub(crate) fn measured_value<'a>(
    u: &'a [f64],
    y: &'a [f64],
    e: Option<&'a [f64]>,
    k: usize,
) -> impl FnMut(VarKind, usize) -> f64 + 'a {
    move |kind, lag| {
        let i = k - lag;
        match kind {
            VarKind::Output => y[i],
            VarKind::Input => u[i],
            VarKind::InputDiff => u[i] - u[i - 1],
            VarKind::InputSign => sign(u[i] - u[i - 1]),
            VarKind::Noise => e.map_or(0.0, |e| e[i]),
        }
    }
}

/// `y = Ψ θ + ξ` over the time instants where every lag is available.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub psi: DMatrix<f64>,
    pub target: DVector<f64>,
    /// Time index of the first row.
    pub row_index: usize,
}

impl RegressionProblem {
    pub fn rows(&self) -> usize {
        self.target.len()
    }

    pub fn params(&self) -> usize {
        self.psi.ncols()
    }

    pub fn residuals(&self, theta: &[f64]) -> DVector<f64> {
        &self.target - &self.psi * DVector::from_column_slice(theta)
    }

    /// Sum of squared one-step residuals.
    pub fn sse(&self, theta: &[f64]) -> f64 {
        self.residuals(theta).norm_squared()
    }
}

/// Builds the regression starting at the structure's own maximum lag.
pub fn build_regression(
    ts: &TimeSeries,
    structure: &ModelStructure,
    residual_estimates: Option<&[f64]>,
) -> Result<RegressionProblem> {
    build_regression_from(ts, structure, residual_estimates, structure.max_lag())
}

/// Builds the regression with rows starting at time `start` (at least the
/// structure's maximum lag); used to score several structures on common rows.
pub fn build_regression_from(
    ts: &TimeSeries,
    structure: &ModelStructure,
    residual_estimates: Option<&[f64]>,
    start: usize,
) -> Result<RegressionProblem> {
    let start = start.max(structure.max_lag());
    let n = ts.len();
    if n <= start {
        return Err(NarxError::InsufficientData {
            needed: start,
            available: n,
        });
    }
    match residual_estimates {
        None if structure.has_noise() => {
            return Err(NarxError::invalid("noise regressors need residual estimates"));
        }
        Some(e) if e.len() != n => {
            return Err(NarxError::invalid(format!(
                "residual estimates have {} samples, series has {n}",
                e.len()
            )));
        }
        _ => {}
    }
    let rows = n - start;
    let regs = structure.regressors();
    let mut psi = DMatrix::zeros(rows, regs.len());
    for row in 0..rows {
        let k = start + row;
        let mut value = measured_value(ts.u(), ts.y(), residual_estimates, k);
        for (j, r) in regs.iter().enumerate() {
            psi[(row, j)] = r.eval(&mut value);
        }
    }
    let target = DVector::from_column_slice(&ts.y()[start..]);
    Ok(RegressionProblem {
        psi,
        target,
        row_index: start,
    })
}

/// Ordinary least squares through pivoted QR.
pub fn least_squares(prob: &RegressionProblem) -> Result<Vec<f64>> {
    Ok(linalg::least_squares(&prob.psi, &prob.target)?.as_slice().to_vec())
}

/// Minimizes `Σ w(k) ξ(k)²`.
pub fn weighted_least_squares(prob: &RegressionProblem, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != prob.rows() {
        return Err(NarxError::invalid(format!(
            "{} weights for {} rows",
            w.len(),
            prob.rows()
        )));
    }
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(NarxError::invalid("weights must be finite and nonnegative"));
    }
    let positive = w.iter().filter(|&&v| v > 0.0).count();
    if positive < prob.params() {
        return Err(NarxError::InsufficientData {
            needed: prob.params() - 1,
            available: positive,
        });
    }
    let mut psi = prob.psi.clone();
    let mut target = prob.target.clone();
    for (i, &wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        psi.row_mut(i).scale_mut(s);
        target[i] *= s;
    }
    Ok(linalg::least_squares(&psi, &target)?.as_slice().to_vec())
}

/// Forgetting-factor weights for `horizon` rows, oldest first:
/// `[λ^(h-1), …, λ, 1]`.
pub fn forgetting_weights(lambda: f64, horizon: usize) -> Vec<f64> {
    (0..horizon)
        .map(|i| lambda.powi((horizon - 1 - i) as i32))
        .collect()
}

/// Linear equality constraints `c = S θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub s: DMatrix<f64>,
    pub c: DVector<f64>,
    pub notes: Vec<String>,
}

/// One constraint row on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub s: Vec<f64>,
    pub c: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConstraintFile {
    rows: Vec<ConstraintRow>,
}

impl ConstraintSet {
    pub fn empty(params: usize) -> Self {
        ConstraintSet {
            s: DMatrix::zeros(0, params),
            c: DVector::zeros(0),
            notes: Vec::new(),
        }
    }

    pub fn from_rows(rows: Vec<ConstraintRow>, params: usize) -> Result<Self> {
        if let Some(bad) = rows.iter().position(|r| r.s.len() != params) {
            return Err(NarxError::invalid(format!(
                "constraint row {bad} has {} entries, expected {params}",
                rows[bad].s.len()
            )));
        }
        let s = DMatrix::from_fn(rows.len(), params, |i, j| rows[i].s[j]);
        let c = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.c));
        let notes = rows.into_iter().map(|r| r.note).collect();
        Ok(ConstraintSet { s, c, notes })
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    pub fn params(&self) -> usize {
        self.s.ncols()
    }

    /// `‖S θ − c‖∞`.
    pub fn violation(&self, theta: &[f64]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (&self.s * DVector::from_column_slice(theta) - &self.c).amax()
    }

    pub fn rows(&self) -> Vec<ConstraintRow> {
        (0..self.len())
            .map(|i| ConstraintRow {
                s: self.s.row(i).iter().copied().collect(),
                c: self.c[i],
                note: self.notes.get(i).cloned().unwrap_or_default(),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ConstraintFile { rows: self.rows() })?)
    }

    /// Parses `{rows: [{s, c, note}]}`. `params` is needed when there are no rows.
    pub fn from_json(text: &str, params: usize) -> Result<Self> {
        let file: ConstraintFile = serde_json::from_str(text)?;
        ConstraintSet::from_rows(file.rows, params)
    }

    /// Stacks two constraint sets over the same parameter vector.
    pub fn stacked(&self, other: &ConstraintSet) -> Result<ConstraintSet> {
        let mut rows = self.rows();
        rows.extend(other.rows());
        ConstraintSet::from_rows(rows, self.params())
    }
}

/// Least squares subject to `S θ = c`, solved in the null space of `S`
/// (orthogonal factorization of `Sᵀ`, then QR on the reduced problem).
pub fn constrained_least_squares(prob: &RegressionProblem, cons: &ConstraintSet) -> Result<Vec<f64>> {
    if cons.params() != prob.params() {
        return Err(NarxError::invalid(format!(
            "constraints act on {} parameters, problem has {}",
            cons.params(),
            prob.params()
        )));
    }
    if cons.is_empty() {
        return least_squares(prob);
    }
    let ns = ConstraintNullSpace::new(&cons.s, &cons.c)?;
    let free = ns.basis.ncols();
    let theta = if free == 0 {
        ns.particular
    } else {
        let reduced = &prob.psi * &ns.basis;
        let rhs = &prob.target - &prob.psi * &ns.particular;
        let qr = PivotedQr::new(reduced);
        if !qr.is_full_column_rank() {
            // Report the regressor columns that lose identifiability.
            let full = PivotedQr::new(prob.psi.clone());
            let columns = if full.is_full_column_rank() {
                (0..prob.params()).collect()
            } else {
                full.dependent_columns()
            };
            return Err(NarxError::RankDeficient { columns });
        }
        let z = qr.solve(&rhs)?;
        &ns.particular + &ns.basis * z
    };
    Ok(theta.as_slice().to_vec())
}

/// Output of [`extended_least_squares`].
#[derive(Debug, Clone, PartialEq)]
pub struct ElsFit {
    /// Final model; its noise terms are used for estimation only and are
    /// skipped by prediction and simulation.
    pub model: PolynomialModel,
    /// One-step residuals aligned with the series (zero before the first row).
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Extended least squares: fit process terms, estimate residuals, refit with
/// noise columns filled by lagged residuals, repeat until the relative
/// parameter change (∞-norm) falls below `tol`.
pub fn extended_least_squares(
    ts: &TimeSeries,
    structure: &ModelStructure,
    max_iter: usize,
    tol: f64,
) -> Result<ElsFit> {
    if !structure.has_noise() {
        return Err(NarxError::invalid("extended least squares needs noise regressors"));
    }
    if max_iter == 0 {
        return Err(NarxError::invalid("max_iter must be at least 1"));
    }
    let start = structure.max_lag();
    let n = ts.len();
    let process = structure.filtered(|r| !r.has_noise());
    let proc_prob = build_regression_from(ts, &process, None, start)?;
    let proc_theta = least_squares(&proc_prob)?;

    let mut residuals = vec![0.0; n];
    let proc_resid = proc_prob.residuals(&proc_theta);
    residuals[start..].copy_from_slice(proc_resid.as_slice());

    let mut theta: Vec<f64> = structure
        .regressors()
        .iter()
        .map(|r| process.position(r).map_or(0.0, |i| proc_theta[i]))
        .collect();

    let y_scale = ts.y()[start..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if proc_resid.norm() <= 1e-12 * y_scale.max(f64::MIN_POSITIVE) {
        return Ok(ElsFit {
            model: PolynomialModel::new(structure.clone(), theta)?,
            residuals,
            iterations: 1,
            converged: true,
        });
    }

    for iter in 1..=max_iter {
        let prob = build_regression_from(ts, structure, Some(&residuals), start)?;
        let next = least_squares(&prob)?;
        let norm = next.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if norm > 1e6 {
            return Err(NarxError::Diverged {
                iterations: iter,
                message: format!("parameter norm {norm:.3e}"),
            });
        }
        let change = next
            .iter()
            .zip(&theta)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
            / norm.max(f64::MIN_POSITIVE);
        theta = next;
        // Residuals of the full model, recomputed recursively so the noise
        // columns see the current estimates.
        for k in start..n {
            let pred: f64 = {
                let mut value = measured_value(ts.u(), ts.y(), Some(&residuals), k);
                structure
                    .regressors()
                    .iter()
                    .zip(&theta)
                    .map(|(r, t)| t * r.eval(&mut value))
                    .sum()
            };
            residuals[k] = ts.y()[k] - pred;
        }
        if change < tol {
            return Ok(ElsFit {
                model: PolynomialModel::new(structure.clone(), theta)?,
                residuals,
                iterations: iter,
                converged: true,
            });
        }
    }
    Ok(ElsFit {
        model: PolynomialModel::new(structure.clone(), theta)?,
        residuals,
        iterations: max_iter,
        converged: false,
    })
}

/// Affine information pair `[v, G]` with weight `w`: `G θ` estimates `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePair {
    pub v: DVector<f64>,
    pub g: DMatrix<f64>,
    pub w: f64,
}

impl AffinePair {
    pub fn new(v: DVector<f64>, g: DMatrix<f64>, w: f64) -> Result<Self> {
        if g.nrows() != v.len() {
            return Err(NarxError::invalid(format!(
                "pair has {} targets but {} design rows",
                v.len(),
                g.nrows()
            )));
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(NarxError::invalid("pair weight must be finite and nonnegative"));
        }
        Ok(AffinePair { v, g, w })
    }

    pub fn from_regression(prob: &RegressionProblem, w: f64) -> Self {
        AffinePair {
            v: prob.target.clone(),
            g: prob.psi.clone(),
            w,
        }
    }

    /// `(v − G θ)ᵀ (v − G θ)`.
    pub fn cost(&self, theta: &[f64]) -> f64 {
        (&self.v - &self.g * DVector::from_column_slice(theta)).norm_squared()
    }

    pub fn with_weight(&self, w: f64) -> Self {
        AffinePair { w, ..self.clone() }
    }
}

/// Minimizer of `Σ wᵢ (vᵢ − Gᵢ θ)ᵀ(vᵢ − Gᵢ θ)`, computed by QR on the
/// `√wᵢ`-scaled stacked pairs.
pub fn multiobjective_estimate(pairs: &[AffinePair]) -> Result<Vec<f64>> {
    let Some(first) = pairs.first() else {
        return Err(NarxError::invalid("no affine information pairs"));
    };
    let n = first.g.ncols();
    if pairs.iter().any(|p| p.g.ncols() != n) {
        return Err(NarxError::invalid("pairs disagree on parameter count"));
    }
    if pairs.iter().all(|p| p.w == 0.0) {
        return Err(NarxError::invalid("all pair weights are zero"));
    }
    let active: Vec<&AffinePair> = pairs.iter().filter(|p| p.w > 0.0).collect();
    let scaled: Vec<DMatrix<f64>> = active.iter().map(|p| &p.g * p.w.sqrt()).collect();
    let refs: Vec<&DMatrix<f64>> = scaled.iter().collect();
    let g = linalg::vstack(&refs);
    let v = DVector::from_iterator(
        g.nrows(),
        active.iter().flat_map(|p| p.v.iter().map(move |x| x * p.w.sqrt())),
    );
    match linalg::least_squares(&g, &v) {
        Ok(theta) => Ok(theta.as_slice().to_vec()),
        Err(NarxError::RankDeficient { .. } | NarxError::InsufficientData { .. }) => Err(
            NarxError::Singular("accumulated information matrix is singular".into()),
        ),
        Err(e) => Err(e),
    }
}

/// One member of the weighted-sum Pareto sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub theta: Vec<f64>,
    /// Dynamical cost `J(Z, Z_M1)`.
    pub j_dyn: f64,
    /// Steady-state cost `J(Z_ss, Z_Mss)`.
    pub j_ss: f64,
}

/// Sweep result; λ values whose weighted problem was singular are listed in
/// `skipped` with the reason.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParetoSweep {
    pub points: Vec<ParetoPoint>,
    pub skipped: Vec<(f64, String)>,
}

/// `n` equally spaced weights in `[0, 1]` (21 by default in the CLI).
pub fn lambda_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// `θ*(λ) = argmin λ J_dyn + (1 − λ) J_ss` for every λ on the grid.
pub fn pareto_sweep(dynamic: &AffinePair, steady: &AffinePair, lambdas: &[f64]) -> Result<ParetoSweep> {
    if lambdas.is_empty() {
        return Err(NarxError::invalid("empty lambda grid"));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(NarxError::invalid(format!("lambda {bad} outside [0, 1]")));
    }
    let results: Vec<(f64, Result<Vec<f64>>)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let pairs = [dynamic.with_weight(lambda), steady.with_weight(1.0 - lambda)];
            (lambda, multiobjective_estimate(&pairs))
        })
        .collect();
    let mut sweep = ParetoSweep::default();
    for (lambda, res) in results {
        match res {
            Ok(theta) => sweep.points.push(ParetoPoint {
                lambda,
                j_dyn: dynamic.cost(&theta),
                j_ss: steady.cost(&theta),
                theta,
            }),
            Err(e) => sweep.skipped.push((lambda, e.to_string())),
        }
    }
    Ok(sweep)
}

/// Output of [`simulation_error_estimate`]: a local minimizer of the free-run
/// error near the starting point, not a global one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationErrorFit {
    pub theta: Vec<f64>,
    pub msse: f64,
    pub initial_msse: f64,
    pub evaluations: usize,
}

/// Minimizes the mean squared free-run error with a restarted simplex search
/// starting from `theta_init` (normally the LS estimate).
pub fn simulation_error_estimate(
    ts: &TimeSeries,
    structure: &ModelStructure,
    theta_init: &[f64],
    budget: usize,
) -> Result<SimulationErrorFit> {
    let model = PolynomialModel::new(structure.clone(), theta_init.to_vec())?;
    let opts = SimOptions::default();
    let initial = free_run_msse(&model, ts, structure.max_lag(), &opts).ok_or_else(|| {
        NarxError::Diverged {
            iterations: 0,
            message: "initial free run diverges".into(),
        }
    })?;
    if budget == 0 {
        return Ok(SimulationErrorFit {
            theta: theta_init.to_vec(),
            msse: initial,
            initial_msse: initial,
            evaluations: 0,
        });
    }
    let cost = |theta: &[f64]| {
        PolynomialModel::new(structure.clone(), theta.to_vec())
            .ok()
            .and_then(|m| free_run_msse(&m, ts, structure.max_lag(), &opts))
            .unwrap_or(f64::INFINITY)
    };
    let res = nelder_mead(cost, theta_init, budget);
    let (theta, msse) = if res.value < initial {
        (res.x, res.value)
    } else {
        (theta_init.to_vec(), initial)
    };
    Ok(SimulationErrorFit {
        theta,
        msse,
        initial_msse: initial,
        evaluations: res.evaluations,
    })
}
