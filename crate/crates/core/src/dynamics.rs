//! Running models forward, steady-state algebra, fixed points and hysteresis.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeries;
use crate::error::{NarxError, Result};
use crate::estimators::measured_value;
use crate::structure::{sign, ClusterTag, PolynomialModel, TermCluster, VarKind};

/// Magnitude tolerance on `|λ| − 1` below which a fixed point is nonhyperbolic.
pub const NONHYPERBOLIC_TOL: f64 = 1e-8;

/// Free-run options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Overrides `u3` with a fixed sign (used to hold a hysteresis branch).
    pub u3_pin: Option<f64>,
    /// `|ŷ|` above this (or a non-finite value) stops the run.
    pub divergence_limit: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            u3_pin: None,
            divergence_limit: 1e12,
        }
    }
}

/// Free-run output. On divergence `y` is truncated just before the offending
/// sample and `diverged_at` holds its index.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeRun {
    pub y: Vec<f64>,
    pub diverged_at: Option<usize>,
}

impl FreeRun {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// One-step-ahead prediction from measured lags. The first `max_lag` entries
/// repeat the measurements.
pub fn predict_osa(model: &PolynomialModel, ts: &TimeSeries) -> Result<Vec<f64>> {
    let start = model.structure().max_lag();
    let n = ts.len();
    if n <= start {
        return Err(NarxError::InsufficientData {
            needed: start,
            available: n,
        });
    }
    let mut out = ts.y()[..start].to_vec();
    out.extend((start..n).map(|k| model.eval_deterministic(measured_value(ts.u(), ts.y(), None, k))));
    Ok(out)
}

/// Free run driven by `u`; `init` gives the first output samples.
pub fn simulate_free_run(model: &PolynomialModel, u: &[f64], init: &[f64]) -> Result<FreeRun> {
    simulate_free_run_with(model, u, init, &SimOptions::default())
}

/// [`simulate_free_run`] with explicit options.
///
/// Samples before `max(max_lag, init.len())` are taken from `init`, padded
/// with its last value (or zero) when it is shorter than the model's reach.
pub fn simulate_free_run_with(
    model: &PolynomialModel,
    u: &[f64],
    init: &[f64],
    opts: &SimOptions,
) -> Result<FreeRun> {
    let n = u.len();
    let order = model.structure().output_order();
    if init.len() < order {
        return Err(NarxError::invalid(format!(
            "model needs {order} initial outputs, got {}",
            init.len()
        )));
    }
    if init.iter().any(|v| !v.is_finite()) || u.iter().any(|v| !v.is_finite()) {
        return Err(NarxError::invalid("non-finite input or initial condition"));
    }
    let start = model.structure().max_lag().max(init.len()).min(n);
    let pad = init.last().copied().unwrap_or(0.0);
    let mut y: Vec<f64> = (0..start).map(|k| init.get(k).copied().unwrap_or(pad)).collect();
    y.reserve(n - start);
    for k in start..n {
        let v = {
            let yy = &y;
            model.eval_deterministic(|kind, lag| {
                let i = k - lag;
                match kind {
                    VarKind::Output => yy[i],
                    VarKind::Input => u[i],
                    VarKind::InputDiff => u[i] - u[i - 1],
                    VarKind::InputSign => opts.u3_pin.unwrap_or_else(|| sign(u[i] - u[i - 1])),
                    VarKind::Noise => 0.0,
                }
            })
        };
        if !v.is_finite() || v.abs() > opts.divergence_limit {
            return Ok(FreeRun { y, diverged_at: Some(k) });
        }
        y.push(v);
    }
    Ok(FreeRun { y, diverged_at: None })
}

/// Mean squared free-run error over samples `start..N`, initialized with the
/// measured outputs before `start`; `None` when the run diverges.
pub fn free_run_msse(model: &PolynomialModel, ts: &TimeSeries, start: usize, opts: &SimOptions) -> Option<f64> {
    let start = start.max(model.structure().max_lag());
    if start >= ts.len() {
        return None;
    }
    let run = simulate_free_run_with(model, ts.u(), &ts.y()[..start], opts).ok()?;
    if run.diverged() {
        return None;
    }
    let sse: f64 = run.y[start..]
        .iter()
        .zip(&ts.y()[start..])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Some(sse / (ts.len() - start) as f64)
}

/// Hysteresis branch: `u3 = +1` while loading, `−1` while unloading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    #[default]
    Loading,
    Unloading,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Branch::Loading => 1.0,
            Branch::Unloading => -1.0,
        }
    }
}

/// `ȳ = Σ_{p,m} Σ_{y^p u^m} ȳ^p ū^m`, keyed by process cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyStateRelation {
    pub branch: Branch,
    pub terms: BTreeMap<TermCluster, f64>,
}

/// Collapses lags (`y(k−i) → ȳ`, `u(k−j) → ū`), drops noise and `u2` terms
/// and sets `u3` to the branch sign.
pub fn steady_state_relation(model: &PolynomialModel, branch: Branch) -> SteadyStateRelation {
    let mut terms = BTreeMap::new();
    for (r, theta) in model.terms() {
        if r.has_noise() || r.has_kind(VarKind::InputDiff) {
            continue;
        }
        let mut p = 0;
        let mut m = 0;
        let mut coef = theta;
        for f in r.factors() {
            match f.kind() {
                VarKind::Output => p += f.exp(),
                VarKind::Input => m += f.exp(),
                VarKind::InputSign => coef *= branch.sign().powi(f.exp() as i32),
                _ => {}
            }
        }
        *terms.entry(TermCluster::process(p, m)).or_insert(0.0) += coef;
    }
    SteadyStateRelation { branch, terms }
}

impl SteadyStateRelation {
    pub fn from_terms(terms: impl IntoIterator<Item = (TermCluster, f64)>) -> Self {
        let mut map = BTreeMap::new();
        for (c, v) in terms {
            *map.entry(TermCluster { tag: ClusterTag::Process, ..c }).or_insert(0.0) += v;
        }
        SteadyStateRelation {
            branch: Branch::Loading,
            terms: map,
        }
    }

    pub fn sigma(&self, p: u32, m: u32) -> f64 {
        self.terms.get(&TermCluster::process(p, m)).copied().unwrap_or(0.0)
    }

    /// Highest power of ȳ with a nonzero coefficient.
    pub fn output_degree(&self) -> u32 {
        self.terms
            .iter()
            .filter(|(_, v)| **v != 0.0)
            .map(|(c, _)| c.p)
            .max()
            .unwrap_or(0)
    }

    /// Right-hand side `F_ss(ȳ, ū)`.
    pub fn eval(&self, y_bar: f64, u_bar: f64) -> f64 {
        self.terms
            .iter()
            .map(|(c, v)| v * y_bar.powi(c.p as i32) * u_bar.powi(c.m as i32))
            .sum()
    }

    /// Coefficients (ascending powers of ȳ) of `F_ss(ȳ, ū) − ȳ`.
    pub fn fixed_point_polynomial(&self, u_bar: f64) -> Vec<f64> {
        let deg = self.output_degree().max(1) as usize;
        let mut c = vec![0.0; deg + 1];
        for (cl, v) in &self.terms {
            c[cl.p as usize] += v * u_bar.powi(cl.m as i32);
        }
        c[1] -= 1.0;
        c
    }
}

/// Classification of a hyperbolic fixed point, or the nonhyperbolic flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedPointClass {
    Attractor,
    Repellor,
    Saddle,
    Nonhyperbolic,
}

/// An equilibrium; `eigvals` and `class` are filled by classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub y_bar: Vec<f64>,
    pub u_bar: Option<f64>,
    pub branch: Option<Branch>,
    /// `(re, im)` pairs.
    pub eigvals: Vec<(f64, f64)>,
    pub class: Option<FixedPointClass>,
}

impl FixedPoint {
    pub fn scalar(&self) -> f64 {
        self.y_bar[0]
    }

    pub fn is_stable(&self) -> bool {
        self.class == Some(FixedPointClass::Attractor)
    }
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * x + v)
}

fn poly_deriv_eval(c: &[f64], x: f64) -> f64 {
    c.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (i, v)| acc * x + i as f64 * v)
}

/// Real roots of a polynomial given by ascending coefficients, via the
/// eigenvalues of its companion matrix followed by Newton polishing.
pub fn real_polynomial_roots(coeffs: &[f64]) -> Result<Vec<f64>> {
    let scale = coeffs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(NarxError::Degenerate(
            "identically zero polynomial: every value is a root".into(),
        ));
    }
    let mut c: Vec<f64> = coeffs.to_vec();
    while c.last().is_some_and(|v| v.abs() <= 1e-15 * scale) {
        c.pop();
    }
    let deg = c.len() - 1;
    let mut roots = match deg {
        0 => return Ok(Vec::new()),
        1 => vec![-c[0] / c[1]],
        _ => {
            let lead = c[deg];
            let mut comp = DMatrix::zeros(deg, deg);
            for j in 0..deg {
                comp[(0, j)] = -c[deg - 1 - j] / lead;
            }
            for i in 1..deg {
                comp[(i, i - 1)] = 1.0;
            }
            comp.complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect()
        }
    };
    for r in roots.iter_mut() {
        for _ in 0..100 {
            let d = poly_deriv_eval(&c, *r);
            if d == 0.0 {
                break;
            }
            let step = poly_eval(&c, *r) / d;
            if !step.is_finite() {
                break;
            }
            *r -= step;
            if step.abs() <= 1e-15 * (1.0 + r.abs()) {
                break;
            }
        }
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-7 * (1.0 + b.abs()));
    Ok(roots)
}

/// All real equilibria of the relation at input level `u_bar`.
pub fn solve_fixed_points(rel: &SteadyStateRelation, u_bar: f64) -> Result<Vec<FixedPoint>> {
    let roots = real_polynomial_roots(&rel.fixed_point_polynomial(u_bar))?;
    Ok(roots
        .into_iter()
        .map(|y| FixedPoint {
            y_bar: vec![y],
            u_bar: Some(u_bar),
            branch: Some(rel.branch),
            eigvals: Vec::new(),
            class: None,
        })
        .collect())
}

/// Class implied by eigenvalue moduli.
pub fn classify_moduli(moduli: &[f64]) -> FixedPointClass {
    if moduli.iter().any(|m| (m - 1.0).abs() <= NONHYPERBOLIC_TOL) {
        FixedPointClass::Nonhyperbolic
    } else if moduli.iter().all(|&m| m < 1.0) {
        FixedPointClass::Attractor
    } else if moduli.iter().all(|&m| m > 1.0) {
        FixedPointClass::Repellor
    } else {
        FixedPointClass::Saddle
    }
}

/// Eigenvalues of a Jacobian and the resulting class.
pub fn eigen_classify(jac: &DMatrix<f64>) -> (Vec<(f64, f64)>, FixedPointClass) {
    if jac.is_empty() {
        return (Vec::new(), FixedPointClass::Attractor);
    }
    let eig: Vec<(f64, f64)> = jac.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
    let moduli: Vec<f64> = eig.iter().map(|(r, i)| r.hypot(*i)).collect();
    (eig, classify_moduli(&moduli))
}

/// Jacobian of the SISO state map in companion form, state
/// `[y(k−1), …, y(k−n_y)]`, at a steady state.
pub fn siso_jacobian(model: &PolynomialModel, y_bar: f64, u_bar: f64, branch: Branch) -> DMatrix<f64> {
    let n = model.structure().output_order();
    let mut jac = DMatrix::zeros(n, n);
    let value = |kind: VarKind, _lag: usize| match kind {
        VarKind::Output => y_bar,
        VarKind::Input => u_bar,
        VarKind::InputDiff => 0.0,
        VarKind::InputSign => branch.sign(),
        VarKind::Noise => 0.0,
    };
    for lag in 1..=n {
        jac[(0, lag - 1)] = model
            .terms()
            .filter(|(r, _)| !r.has_noise())
            .map(|(r, t)| t * r.derivative(VarKind::Output, lag, value))
            .sum();
    }
    for i in 1..n {
        jac[(i, i - 1)] = 1.0;
    }
    jac
}

/// Attaches eigenvalues and class to a SISO fixed point.
pub fn classify_fixed_point(model: &PolynomialModel, mut fp: FixedPoint) -> FixedPoint {
    let jac = siso_jacobian(
        model,
        fp.scalar(),
        fp.u_bar.unwrap_or(0.0),
        fp.branch.unwrap_or_default(),
    );
    let (eig, class) = eigen_classify(&jac);
    fp.eigvals = eig;
    fp.class = Some(class);
    fp
}

/// Monomial `y1(k−1)^e1 · y2(k−1)^e2` of a planar NAR map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlanarTerm {
    pub e1: u32,
    pub e2: u32,
}

impl PlanarTerm {
    pub const fn new(e1: u32, e2: u32) -> Self {
        PlanarTerm { e1, e2 }
    }

    pub fn eval(&self, y: [f64; 2]) -> f64 {
        y[0].powi(self.e1 as i32) * y[1].powi(self.e2 as i32)
    }

    /// Gradient with respect to `(y1, y2)`.
    pub fn grad(&self, y: [f64; 2]) -> [f64; 2] {
        let d = |e: u32, v: f64| if e == 0 { 0.0 } else { e as f64 * v.powi(e as i32 - 1) };
        [
            d(self.e1, y[0]) * y[1].powi(self.e2 as i32),
            y[0].powi(self.e1 as i32) * d(self.e2, y[1]),
        ]
    }
}

/// Regressor lists of the two equations of a planar NAR model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanarStructure {
    pub eq1: Vec<PlanarTerm>,
    pub eq2: Vec<PlanarTerm>,
}

impl PlanarStructure {
    /// All monomials with `1 ≤ e1 + e2 ≤ ell`, optionally with the constant.
    pub fn full(ell: u32, constant: bool) -> Vec<PlanarTerm> {
        let mut out = Vec::new();
        for deg in u32::from(!constant)..=ell {
            for e1 in (0..=deg).rev() {
                out.push(PlanarTerm::new(e1, deg - e1));
            }
        }
        out
    }

    pub fn params(&self) -> usize {
        self.eq1.len() + self.eq2.len()
    }

    /// Block-diagonal regression over one or more trajectories: rows for
    /// equation 1 come first, then rows for equation 2.
    pub fn regression(&self, trajectories: &[Vec<[f64; 2]>]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let pairs: Vec<([f64; 2], [f64; 2])> = trajectories
            .iter()
            .flat_map(|t| t.windows(2).map(|w| (w[0], w[1])))
            .collect();
        let rows = pairs.len();
        if rows < self.eq1.len().max(self.eq2.len()) {
            return Err(NarxError::InsufficientData {
                needed: self.eq1.len().max(self.eq2.len()),
                available: rows,
            });
        }
        let n1 = self.eq1.len();
        let mut psi = DMatrix::zeros(2 * rows, self.params());
        let mut target = DVector::zeros(2 * rows);
        for (i, (prev, next)) in pairs.iter().enumerate() {
            for (j, t) in self.eq1.iter().enumerate() {
                psi[(i, j)] = t.eval(*prev);
            }
            for (j, t) in self.eq2.iter().enumerate() {
                psi[(rows + i, n1 + j)] = t.eval(*prev);
            }
            target[i] = next[0];
            target[rows + i] = next[1];
        }
        Ok((psi, target))
    }
}

/// Planar NAR map `y(k) = F(y(k−1))` with `θ = [θ₁; θ₂]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarModel {
    pub structure: PlanarStructure,
    pub theta: Vec<f64>,
}

impl PlanarModel {
    pub fn new(structure: PlanarStructure, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != structure.params() {
            return Err(NarxError::invalid(format!(
                "{} parameters for {} planar terms",
                theta.len(),
                structure.params()
            )));
        }
        Ok(PlanarModel { structure, theta })
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.theta.split_at(self.structure.eq1.len())
    }

    pub fn map(&self, y: [f64; 2]) -> [f64; 2] {
        let (t1, t2) = self.split();
        let f = |terms: &[PlanarTerm], th: &[f64]| terms.iter().zip(th).map(|(t, c)| c * t.eval(y)).sum();
        [f(&self.structure.eq1, t1), f(&self.structure.eq2, t2)]
    }

    /// Analytic Jacobian of the map.
    pub fn jacobian(&self, y: [f64; 2]) -> DMatrix<f64> {
        let (t1, t2) = self.split();
        let mut jac = DMatrix::zeros(2, 2);
        for (row, (terms, th)) in [(&self.structure.eq1, t1), (&self.structure.eq2, t2)].into_iter().enumerate() {
            for (t, c) in terms.iter().zip(th) {
                let g = t.grad(y);
                jac[(row, 0)] += c * g[0];
                jac[(row, 1)] += c * g[1];
            }
        }
        jac
    }

    /// `‖F(y) − y‖∞`.
    pub fn fixed_point_residual(&self, y: [f64; 2]) -> f64 {
        let f = self.map(y);
        (f[0] - y[0]).abs().max((f[1] - y[1]).abs())
    }

    pub fn trajectory(&self, y0: [f64; 2], steps: usize) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(steps + 1);
        out.push(y0);
        for _ in 0..steps {
            let next = self.map(*out.last().unwrap());
            out.push(next);
        }
        out
    }

    /// Damped Newton on `F(y) − y = 0` from each start, keeping converged
    /// roots and merging those within 1e-6 of each other.
    pub fn fixed_points(&self, starts: &[[f64; 2]]) -> Vec<FixedPoint> {
        let mut found: Vec<[f64; 2]> = Vec::new();
        for &s in starts {
            let Some(root) = self.newton(s) else { continue };
            if !found
                .iter()
                .any(|r| (r[0] - root[0]).abs().max((r[1] - root[1]).abs()) < 1e-6)
            {
                found.push(root);
            }
        }
        found
            .into_iter()
            .map(|y| self.classify(FixedPoint {
                y_bar: y.to_vec(),
                u_bar: None,
                branch: None,
                eigvals: Vec::new(),
                class: None,
            }))
            .collect()
    }

    fn newton(&self, mut y: [f64; 2]) -> Option<[f64; 2]> {
        let g = |y: [f64; 2]| {
            let f = self.map(y);
            [f[0] - y[0], f[1] - y[1]]
        };
        let norm = |v: [f64; 2]| v[0].hypot(v[1]);
        let mut r = g(y);
        for _ in 0..200 {
            if norm(r) < 1e-13 * (1.0 + norm(y)) {
                return Some(y);
            }
            let mut j = self.jacobian(y);
            j[(0, 0)] -= 1.0;
            j[(1, 1)] -= 1.0;
            let step = j.lu().solve(&DVector::from_column_slice(&r))?;
            let mut t = 1.0;
            loop {
                let cand = [y[0] - t * step[0], y[1] - t * step[1]];
                let rc = g(cand);
                if norm(rc) < norm(r) || t < 1e-8 {
                    y = cand;
                    r = rc;
                    break;
                }
                t *= 0.5;
            }
            if !y[0].is_finite() || !y[1].is_finite() {
                return None;
            }
        }
        (self.fixed_point_residual(y) < 1e-9).then_some(y)
    }

    pub fn classify(&self, mut fp: FixedPoint) -> FixedPoint {
        let (eig, class) = eigen_classify(&self.jacobian([fp.y_bar[0], fp.y_bar[1]]));
        fp.eigvals = eig;
        fp.class = Some(class);
        fp
    }
}

/// Equilibria at one input level of a static curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticCurvePoint {
    pub u_bar: f64,
    /// Output levels of attracting equilibria, ascending.
    pub stable: Vec<f64>,
    pub fixed_points: Vec<FixedPoint>,
}

/// Classified equilibria along `u_grid`; grid points are solved in parallel.
pub fn static_curve(model: &PolynomialModel, u_grid: &[f64], branch: Branch) -> Result<Vec<StaticCurvePoint>> {
    if u_grid.is_empty() {
        return Err(NarxError::invalid("empty input grid"));
    }
    let rel = steady_state_relation(model, branch);
    u_grid
        .par_iter()
        .map(|&u_bar| {
            let fps: Vec<FixedPoint> = solve_fixed_points(&rel, u_bar)?
                .into_iter()
                .map(|fp| classify_fixed_point(model, fp))
                .collect();
            let stable = fps.iter().filter(|f| f.is_stable()).map(FixedPoint::scalar).collect();
            Ok(StaticCurvePoint {
                u_bar,
                stable,
                fixed_points: fps,
            })
        })
        .collect()
}

/// Window length and range tolerance of the settling test, and the step cap.
pub const SETTLE_WINDOW: usize = 1000;
pub const SETTLE_RANGE: f64 = 1e-8;
pub const SETTLE_MAX_STEPS: usize = 1_000_000;

/// Runs the model at constant input from a flat initial condition `y0` until
/// the last [`SETTLE_WINDOW`] outputs span less than [`SETTLE_RANGE`].
/// `branch` pins `u3`. Returns `None` on divergence or when the cap is hit.
pub fn settle(model: &PolynomialModel, u_bar: f64, y0: f64, branch: Option<Branch>) -> Option<f64> {
    let reach = model.structure().max_lag().max(1);
    let opts = SimOptions {
        u3_pin: branch.map(Branch::sign),
        ..SimOptions::default()
    };
    let mut hist = vec![y0; reach];
    let chunk = SETTLE_WINDOW * 10;
    let u = vec![u_bar; reach + chunk];
    let mut steps = 0;
    while steps < SETTLE_MAX_STEPS {
        let run = simulate_free_run_with(model, &u, &hist, &opts).ok()?;
        if run.diverged() {
            return None;
        }
        steps += chunk;
        let tail = &run.y[run.y.len() - SETTLE_WINDOW..];
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if hi - lo < SETTLE_RANGE {
            return Some(*run.y.last().unwrap());
        }
        hist = run.y[run.y.len() - reach..].to_vec();
    }
    None
}

/// `ȳ(ū) = num(ū) / den(ū)`, coefficients in ascending powers of ū.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalCurve {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl RationalCurve {
    pub fn eval(&self, u: f64) -> f64 {
        poly_eval(&self.num, u) / poly_eval(&self.den, u)
    }

    /// Solves a relation linear in ȳ: `ȳ = a(ū) + b(ū) ȳ`.
    pub fn from_relation(rel: &SteadyStateRelation) -> Result<Self> {
        if rel.output_degree() > 1 {
            return Err(NarxError::invalid(
                "steady-state relation is not linear in the output",
            ));
        }
        let deg_u = rel.terms.keys().map(|c| c.m).max().unwrap_or(0) as usize;
        let mut num = vec![0.0; deg_u + 1];
        let mut den = vec![0.0; deg_u + 1];
        den[0] = 1.0;
        for (c, v) in &rel.terms {
            match c.p {
                0 => num[c.m as usize] += v,
                _ => den[c.m as usize] -= v,
            }
        }
        Ok(RationalCurve { num, den })
    }
}

/// Loading and unloading steady-state curves of a hysteretic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisBranches {
    pub loading: RationalCurve,
    pub unloading: RationalCurve,
}

/// Branch curves with `u2 = 0` and `u3 = ±1`.
pub fn hysteresis_branches(model: &PolynomialModel) -> Result<HysteresisBranches> {
    if !model.regressors().iter().any(|r| r.has_kind(VarKind::InputSign)) {
        return Err(NarxError::invalid(
            "model cannot exhibit rate-independent hysteresis",
        ));
    }
    Ok(HysteresisBranches {
        loading: RationalCurve::from_relation(&steady_state_relation(model, Branch::Loading))?,
        unloading: RationalCurve::from_relation(&steady_state_relation(model, Branch::Unloading))?,
    })
}

/// Trapezoid-rule area between the branches over `[u_min, u_max]`.
pub fn loop_area(branches: &HysteresisBranches, u_min: f64, u_max: f64, points: usize) -> f64 {
    let points = points.max(2);
    let h = (u_max - u_min) / (points - 1) as f64;
    let gap = |i: usize| {
        let u = u_min + h * i as f64;
        (branches.loading.eval(u) - branches.unloading.eval(u)).abs()
    };
    let inner: f64 = (1..points - 1).map(gap).sum();
    h * (inner + 0.5 * (gap(0) + gap(points - 1)))
}

/// Triangular wave from `u_min` up to `u_max` and back, `cycles` periods of
/// `period` samples each.
pub fn triangular_wave(u_min: f64, u_max: f64, period: usize, cycles: usize) -> Vec<f64> {
    let half = (period / 2).max(1) as f64;
    (0..period * cycles)
        .map(|k| {
            let phase = (k % period) as f64;
            let frac = if phase <= half { phase / half } else { 2.0 - phase / half };
            u_min + (u_max - u_min) * frac
        })
        .collect()
}

/// Absolute shoelace area enclosed by the `(u, y)` polygon.
pub fn shoelace_area(u: &[f64], y: &[f64]) -> f64 {
    let n = u.len().min(y.len());
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        s += u[i] * y[j] - u[j] * y[i];
    }
    0.5 * s.abs()
}

/// Area between the rising-input and falling-input parts of a recorded loop:
/// each part is interpolated on a common grid over the shared input range and
/// `|y_up − y_down|` is integrated with the trapezoid rule. Crossing branches
/// add up instead of cancelling.
pub fn trajectory_loop_area(u: &[f64], y: &[f64], points: usize) -> f64 {
    let n = u.len().min(y.len());
    let mut up: Vec<(f64, f64)> = Vec::new();
    let mut down: Vec<(f64, f64)> = Vec::new();
    for k in 1..n {
        if u[k] > u[k - 1] {
            up.push((u[k], y[k]));
        } else if u[k] < u[k - 1] {
            down.push((u[k], y[k]));
        }
    }
    if up.len() < 2 || down.len() < 2 {
        return 0.0;
    }
    up.sort_by(|a, b| a.0.total_cmp(&b.0));
    down.sort_by(|a, b| a.0.total_cmp(&b.0));
    let lo = up[0].0.max(down[0].0);
    let hi = up[up.len() - 1].0.min(down[down.len() - 1].0);
    if hi <= lo {
        return 0.0;
    }
    let interp = |pts: &[(f64, f64)], x: f64| {
        let i = pts.partition_point(|p| p.0 < x).clamp(1, pts.len() - 1);
        let (x0, y0) = pts[i - 1];
        let (x1, y1) = pts[i];
        if x1 == x0 { y1 } else { y0 + (y1 - y0) * (x - x0) / (x1 - x0) }
    };
    let points = points.max(2);
    let h = (hi - lo) / (points - 1) as f64;
    let gap = |i: usize| {
        let x = lo + h * i as f64;
        (interp(&up, x) - interp(&down, x)).abs()
    };
    let inner: f64 = (1..points - 1).map(gap).sum();
    h * (inner + 0.5 * (gap(0) + gap(points - 1)))
}
