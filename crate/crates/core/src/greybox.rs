//! Auxiliary information turned into linear equality constraints and
//! candidate-set edits.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Branch, PlanarStructure, SteadyStateRelation};
use crate::error::{NarxError, Result};
use crate::estimators::{AffinePair, ConstraintRow, ConstraintSet};
use crate::linalg::{self, ConstraintNullSpace};
use crate::structure::{cluster_of, ModelStructure, Regressor, TermCluster, VarKind};

/// A measured equilibrium `(ū, ȳ)`; hysteretic models need the branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyStatePoint {
    pub u_bar: f64,
    pub y_bar: f64,
    #[serde(default)]
    pub branch: Branch,
}

impl SteadyStatePoint {
    pub fn new(u_bar: f64, y_bar: f64) -> Self {
        SteadyStatePoint {
            u_bar,
            y_bar,
            branch: Branch::Loading,
        }
    }

    pub fn on(mut self, branch: Branch) -> Self {
        self.branch = branch;
        self
    }
}

/// Kinds of prior knowledge the constraint builders accept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxInfo {
    StaticPoints { points: Vec<SteadyStatePoint> },
    ClusterTargets { targets: Vec<(TermCluster, f64)> },
    Transcritical { u_c: f64, alpha: f64 },
    ImposedFixedPoint { target: [f64; 2] },
    ForbiddenClusters { clusters: Vec<TermCluster> },
}

/// Regressor values in steady state: output lags → ȳ, input lags → ū,
/// `u2` → 0, `u3` → branch sign.
pub fn steady_state_row(structure: &ModelStructure, point: &SteadyStatePoint) -> Result<Vec<f64>> {
    if structure.has_noise() {
        return Err(NarxError::invalid("steady-state rows need a noise-free structure"));
    }
    Ok(structure
        .regressors()
        .iter()
        .map(|r| {
            r.eval(|kind, _| match kind {
                VarKind::Output => point.y_bar,
                VarKind::Input => point.u_bar,
                VarKind::InputDiff => 0.0,
                VarKind::InputSign => point.branch.sign(),
                VarKind::Noise => 0.0,
            })
        })
        .collect())
}

fn check_rank(cons: &ConstraintSet) -> Result<()> {
    ConstraintNullSpace::new(&cons.s, &cons.c).map(|_| ())
}

/// One row per point: `ȳ = Σ θ_j ψ_j(ȳ, ū)`.
pub fn constraints_from_static_points(
    structure: &ModelStructure,
    points: &[SteadyStatePoint],
) -> Result<ConstraintSet> {
    if points.len() > structure.len() {
        return Err(NarxError::invalid(format!(
            "{} points exceed {} parameters",
            points.len(),
            structure.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| !p.u_bar.is_finite() || !p.y_bar.is_finite()) {
        return Err(NarxError::invalid(format!("non-finite steady-state point {p:?}")));
    }
    let rows = points
        .iter()
        .map(|p| {
            Ok(ConstraintRow {
                s: steady_state_row(structure, p)?,
                c: p.y_bar,
                note: format!("static point u={} y={} ({:?})", p.u_bar, p.y_bar, p.branch).to_lowercase(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cons = ConstraintSet::from_rows(rows, structure.len())?;
    check_rank(&cons)?;
    Ok(cons)
}

/// 0/1 membership rows fixing cluster coefficients.
pub fn constraints_from_cluster_targets(
    structure: &ModelStructure,
    targets: &BTreeMap<TermCluster, f64>,
) -> Result<ConstraintSet> {
    let clusters: Vec<TermCluster> = structure.regressors().iter().map(cluster_of).collect();
    let mut rows = Vec::new();
    for (cl, &target) in targets {
        if !clusters.contains(cl) {
            return Err(NarxError::invalid(format!("cluster {cl} has no regressor in the structure")));
        }
        rows.push(ConstraintRow {
            s: clusters.iter().map(|c| f64::from(u8::from(c == cl))).collect(),
            c: target,
            note: format!("{cl} = {target}"),
        });
    }
    ConstraintSet::from_rows(rows, structure.len())
}

fn indicator(structure: &ModelStructure, cl: TermCluster) -> Vec<f64> {
    structure
        .regressors()
        .iter()
        .map(|r| f64::from(u8::from(cluster_of(r) == cl)))
        .collect()
}

const OMEGA_Y: TermCluster = TermCluster::process(1, 0);
const OMEGA_UY: TermCluster = TermCluster::process(1, 1);
const OMEGA_Y2: TermCluster = TermCluster::process(2, 0);
const OMEGA_U2: TermCluster = TermCluster::process(0, 2);

/// Clusters a transcritical constraint set acts on.
pub const TRANSCRITICAL_CLUSTERS: [TermCluster; 4] = [OMEGA_U2, OMEGA_Y, OMEGA_UY, OMEGA_Y2];

/// Linearized transcritical geometry: equilibria `ȳ = 0` and a line of slope
/// `alpha` crossing it at `u_c`.
///
/// Rows: `Σ_{u²} = 0`, `Σ_y + u_c Σ_{uy} = 1`, `Σ_{uy} + alpha Σ_{y²} = 0`.
pub fn constraints_transcritical(structure: &ModelStructure, u_c: f64, alpha: f64) -> Result<ConstraintSet> {
    if !u_c.is_finite() || !alpha.is_finite() {
        return Err(NarxError::invalid("breakpoint and slope must be finite"));
    }
    if alpha == 0.0 {
        return Err(NarxError::invalid("slope alpha must be nonzero"));
    }
    let present: Vec<TermCluster> = structure.regressors().iter().map(cluster_of).collect();
    for forbidden in [TermCluster::process(0, 0), TermCluster::process(0, 1)] {
        if present.contains(&forbidden) {
            return Err(NarxError::invalid(format!(
                "{forbidden} must be absent for a transcritical static curve"
            )));
        }
    }
    for required in TRANSCRITICAL_CLUSTERS {
        if !present.contains(&required) {
            return Err(NarxError::invalid(format!("structure lacks required cluster {required}")));
        }
    }
    let a = |cl| indicator(structure, cl);
    let comb = |x: Vec<f64>, k: f64, y: Vec<f64>| -> Vec<f64> { x.iter().zip(&y).map(|(p, q)| p + k * q).collect() };
    let rows = vec![
        ConstraintRow {
            s: a(OMEGA_U2),
            c: 0.0,
            note: "Sigma[u^2] = 0".into(),
        },
        ConstraintRow {
            s: comb(a(OMEGA_Y), u_c, a(OMEGA_UY)),
            c: 1.0,
            note: format!("breakpoint at u = {u_c}"),
        },
        ConstraintRow {
            s: comb(a(OMEGA_UY), alpha, a(OMEGA_Y2)),
            c: 0.0,
            note: format!("slope {alpha}"),
        },
    ];
    ConstraintSet::from_rows(rows, structure.len())
}

/// Breakpoint and slope of the nonzero equilibrium line of a relation whose
/// only clusters are `Ω_y`, `Ω_{uy}`, `Ω_{y²}` (plus a vanishing `Ω_{u²}`).
pub fn transcritical_geometry(rel: &SteadyStateRelation) -> Result<(f64, f64)> {
    let (s_y, s_uy, s_y2) = (rel.sigma(1, 0), rel.sigma(1, 1), rel.sigma(2, 0));
    if s_uy == 0.0 || s_y2 == 0.0 {
        return Err(NarxError::Degenerate(
            "Sigma[uy] and Sigma[y^2] must be nonzero".into(),
        ));
    }
    Ok(((1.0 - s_y) / s_uy, -s_uy / s_y2))
}

/// Imposes `target` as a fixed point of a planar NAR map. Rows whose
/// regressors all vanish at the target are dropped when their target is zero
/// (the point is an equilibrium by structure) and rejected otherwise.
pub fn constraints_fixed_point(structure: &PlanarStructure, target: [f64; 2]) -> Result<ConstraintSet> {
    if !target[0].is_finite() || !target[1].is_finite() {
        return Err(NarxError::invalid("fixed-point target must be finite"));
    }
    let n1 = structure.eq1.len();
    let n = structure.params();
    let mut rows = Vec::new();
    for (eq, terms) in [&structure.eq1, &structure.eq2].into_iter().enumerate() {
        let mut s = vec![0.0; n];
        let offset = if eq == 0 { 0 } else { n1 };
        for (j, t) in terms.iter().enumerate() {
            s[offset + j] = t.eval(target);
        }
        if s.iter().all(|v| *v == 0.0) {
            if target[eq] == 0.0 {
                continue;
            }
            return Err(NarxError::RankDeficientConstraints { rows: vec![eq] });
        }
        rows.push(ConstraintRow {
            s,
            c: target[eq],
            note: format!("y{} fixed at {}", eq + 1, target[eq]),
        });
    }
    ConstraintSet::from_rows(rows, n)
}

/// Drops candidates belonging to any forbidden cluster; returns the survivors
/// and how many were removed.
pub fn prune_clusters(candidates: &[Regressor], forbidden: &[TermCluster]) -> Result<(Vec<Regressor>, usize)> {
    let kept: Vec<Regressor> = candidates
        .iter()
        .filter(|r| !forbidden.contains(&cluster_of(r)))
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(NarxError::invalid("pruning removed every candidate"));
    }
    let removed = candidates.len() - kept.len();
    Ok((kept, removed))
}

/// Adds, for each required cluster missing from `selected`, its first
/// candidate in canonical order.
pub fn complete_clusters(
    selected: &[Regressor],
    candidates: &[Regressor],
    required: &[TermCluster],
) -> Result<Vec<Regressor>> {
    let mut out = selected.to_vec();
    let mut sorted = candidates.to_vec();
    sorted.sort();
    for cl in required {
        if out.iter().any(|r| cluster_of(r) == *cl) {
            continue;
        }
        let Some(r) = sorted.iter().find(|r| cluster_of(r) == *cl) else {
            return Err(NarxError::invalid(format!("no candidate in cluster {cl}")));
        };
        out.push(r.clone());
    }
    Ok(out)
}

/// Affine information pair from steady-state data: `G` holds the
/// steady-state regressor rows, `v` the measured outputs.
pub fn steady_state_pair(structure: &ModelStructure, points: &[SteadyStatePoint], w: f64) -> Result<AffinePair> {
    let rows = points
        .iter()
        .map(|p| steady_state_row(structure, p))
        .collect::<Result<Vec<_>>>()?;
    let g = DMatrix::from_fn(rows.len(), structure.len(), |i, j| rows[i][j]);
    let v = DVector::from_iterator(points.len(), points.iter().map(|p| p.y_bar));
    AffinePair::new(v, g, w)
}

/// Rational static curve `ȳ = N(ū) / (1 − D(ū))` with `N = Σ Σ_c ū^m` over
/// clusters `Ω_{u^m}` and `D = Σ Σ_c ū^m` over clusters `Ω_{y u^m}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalTemplate {
    pub numerator: Vec<TermCluster>,
    pub denominator: Vec<TermCluster>,
}

impl RationalTemplate {
    pub fn new(numerator: Vec<TermCluster>, denominator: Vec<TermCluster>) -> Result<Self> {
        if numerator.iter().any(|c| c.p != 0) {
            return Err(NarxError::invalid("numerator clusters must be free of the output"));
        }
        if denominator.iter().any(|c| c.p != 1) {
            return Err(NarxError::invalid("denominator clusters must be linear in the output"));
        }
        if numerator.is_empty() {
            return Err(NarxError::invalid("template needs a numerator cluster"));
        }
        Ok(RationalTemplate {
            numerator,
            denominator,
        })
    }

    pub fn unknowns(&self) -> usize {
        self.numerator.len() + self.denominator.len()
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        params.split_at(self.numerator.len())
    }

    pub fn den(&self, params: &[f64], u: f64) -> f64 {
        let (_, d) = self.split(params);
        1.0 - self.denominator.iter().zip(d).map(|(c, v)| v * u.powi(c.m as i32)).sum::<f64>()
    }

    pub fn num(&self, params: &[f64], u: f64) -> f64 {
        let (n, _) = self.split(params);
        self.numerator.iter().zip(n).map(|(c, v)| v * u.powi(c.m as i32)).sum()
    }

    pub fn eval(&self, params: &[f64], u: f64) -> f64 {
        self.num(params, u) / self.den(params, u)
    }

    pub fn cost(&self, params: &[f64], points: &[SteadyStatePoint]) -> f64 {
        points
            .iter()
            .map(|p| {
                let r = p.y_bar - self.eval(params, p.u_bar);
                r * r
            })
            .sum()
    }

    fn jacobian_row(&self, params: &[f64], u: f64) -> Vec<f64> {
        let d = self.den(params, u);
        let n = self.num(params, u);
        let mut row: Vec<f64> = self.numerator.iter().map(|c| u.powi(c.m as i32) / d).collect();
        row.extend(self.denominator.iter().map(|c| n * u.powi(c.m as i32) / (d * d)));
        row
    }
}

/// Fitted cluster targets plus the final residual sum of squares.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFit {
    pub targets: BTreeMap<TermCluster, f64>,
    pub params: Vec<f64>,
    pub cost: f64,
}

const MULTISTARTS: usize = 16;

/// Nonlinear LS fit of a rational template to steady-state data.
///
/// Clusters listed in `pinned` are held at the given values. The remaining
/// ones start from the linearized fit `ȳ = N + ȳ D`, then Levenberg–Marquardt
/// runs from that point and from 16 seeded perturbations; the best run wins.
/// A template whose free parameters are not locally identifiable from the
/// data (the Jacobian at the optimum loses rank) is rejected as ill-posed.
pub fn fit_static_targets(
    template: &RationalTemplate,
    points: &[SteadyStatePoint],
    pinned: &BTreeMap<TermCluster, f64>,
) -> Result<StaticFit> {
    let clusters: Vec<TermCluster> = template.numerator.iter().chain(&template.denominator).copied().collect();
    if let Some(cl) = pinned.keys().find(|c| !clusters.contains(c)) {
        return Err(NarxError::invalid(format!("pinned cluster {cl} is not in the template")));
    }
    let free: Vec<usize> = (0..clusters.len()).filter(|&j| !pinned.contains_key(&clusters[j])).collect();
    if free.is_empty() {
        return Err(NarxError::invalid("every template cluster is pinned"));
    }
    if points.len() < free.len() {
        return Err(NarxError::InsufficientData {
            needed: free.len(),
            available: points.len(),
        });
    }
    let base: Vec<f64> = clusters.iter().map(|c| pinned.get(c).copied().unwrap_or(0.0)).collect();

    let n_num = template.numerator.len();
    let column = |p: &SteadyStatePoint, j: usize| {
        if j < n_num {
            p.u_bar.powi(template.numerator[j].m as i32)
        } else {
            p.y_bar * p.u_bar.powi(template.denominator[j - n_num].m as i32)
        }
    };
    let a = DMatrix::from_fn(points.len(), free.len(), |i, k| column(&points[i], free[k]));
    let b = DVector::from_iterator(
        points.len(),
        points.iter().map(|p| {
            p.y_bar
                - (0..clusters.len())
                    .filter(|j| !free.contains(j))
                    .map(|j| base[j] * column(p, j))
                    .sum::<f64>()
        }),
    );
    let init: Vec<f64> = linalg::least_squares(&a, &b)
        .map(|x| x.as_slice().to_vec())
        .unwrap_or_else(|_| vec![0.0; free.len()]);

    let mut rng = ChaCha8Rng::seed_from_u64(0x57a7_1c);
    let mut starts = vec![init.clone()];
    for _ in 0..MULTISTARTS {
        starts.push(
            init.iter()
                .map(|v| v + (0.5 * v.abs() + 0.05) * rng.random_range(-1.0..1.0))
                .collect(),
        );
    }
    let best = starts
        .par_iter()
        .filter_map(|s| levenberg_marquardt(template, points, s, &free, &base))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((x, cost)) = best else {
        return Err(NarxError::NoConvergence(
            "static template fit failed from every start".into(),
        ));
    };
    let params = expand(&x, &free, &base);

    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.u_bar), h.max(p.u_bar)));
    let d0 = template.den(&params, lo);
    for i in 0..=1000 {
        let u = lo + (hi - lo) * i as f64 / 1000.0;
        let d = template.den(&params, u);
        if d.abs() < 1e-9 || d.signum() != d0.signum() {
            return Err(NarxError::IllPosed(format!(
                "fitted denominator vanishes near u = {u:.6} inside the data range"
            )));
        }
    }
    let jac = DMatrix::from_fn(points.len(), free.len(), |i, k| template.jacobian_row(&params, points[i].u_bar)[free[k]]);
    let qr = linalg::PivotedQr::new(jac);
    if !qr.is_full_column_rank() {
        let names: Vec<String> = free.iter().map(|&j| clusters[j].to_string()).collect();
        return Err(NarxError::IllPosed(format!(
            "static data identify only {} of the free clusters [{}]; pin at least {} of them",
            qr.rank(),
            names.join(", "),
            free.len() - qr.rank()
        )));
    }
    let targets = clusters.iter().copied().zip(params.iter().copied()).collect();
    Ok(StaticFit { targets, params, cost })
}

fn expand(x: &[f64], free: &[usize], base: &[f64]) -> Vec<f64> {
    let mut full = base.to_vec();
    for (&j, v) in free.iter().zip(x) {
        full[j] = *v;
    }
    full
}

fn levenberg_marquardt(
    template: &RationalTemplate,
    points: &[SteadyStatePoint],
    start: &[f64],
    free: &[usize],
    base: &[f64],
) -> Option<(Vec<f64>, f64)> {
    let k = start.len();
    let cost_of = |x: &[f64]| template.cost(&expand(x, free, base), points);
    let mut x = start.to_vec();
    let mut cost = cost_of(&x);
    if !cost.is_finite() {
        return None;
    }
    let mut mu = 1e-3;
    for _ in 0..500 {
        let params = expand(&x, free, base);
        let j = DMatrix::from_fn(points.len(), k, |i, c| template.jacobian_row(&params, points[i].u_bar)[free[c]]);
        let r = DVector::from_iterator(points.len(), points.iter().map(|p| p.y_bar - template.eval(&params, p.u_bar)));
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        if jtr.amax() <= 1e-15 * (1.0 + cost) {
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut m = jtj.clone();
            for d in 0..k {
                m[(d, d)] += mu * (jtj[(d, d)] + 1e-12);
            }
            let Some(step) = m.lu().solve(&jtr) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
            let c = cost_of(&cand);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                x = cand;
                cost = c;
                mu = (mu / 3.0).max(1e-15);
                improved = true;
                if rel < 1e-15 || step.amax() < 1e-14 {
                    return Some((x, cost));
                }
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    cost.is_finite().then_some((x, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{static_curve, steady_state_relation, PlanarModel, PlanarTerm};
    use crate::estimators::{constrained_least_squares, RegressionProblem};
    use crate::structure::{cluster_coefficients, generate_candidates, CandidateOptions, MetaParams, PolynomialModel};

    fn example2_structure() -> ModelStructure {
        let (u1, u2) = (Regressor::u(1), Regressor::u(2));
        ModelStructure::from_regressors(vec![
            Regressor::y(1),
            Regressor::y(2),
            u1.clone(),
            u2.pow(2),
            u1.times(&u2),
            u2,
        ])
        .unwrap()
    }

    #[test]
    fn static_point_rows_match_worked_example() {
        let s = example2_structure();
        let pts = [SteadyStatePoint::new(0.7, 1.9), SteadyStatePoint::new(2.0, 3.1)];
        let cons = constraints_from_static_points(&s, &pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let (u, y) = (p.u_bar, p.y_bar);
            let want = [y, y, u, u * u, u * u, u];
            let got: Vec<f64> = cons.s.row(i).iter().copied().collect();
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15));
            assert_eq!(cons.c[i], y);
        }
    }

    fn valve_structure() -> ModelStructure {
        let u2 = Regressor::linear(VarKind::InputDiff, 1);
        let u3 = Regressor::linear(VarKind::InputSign, 1);
        ModelStructure::from_regressors(vec![
            Regressor::y(1),
            Regressor::u(1),
            Regressor::constant(),
            u2.times(&Regressor::u(1)),
            u2.times(&Regressor::y(1)),
            Regressor::u(1).times(&Regressor::y(1)),
            u3.times(&Regressor::u(1)),
            u3.times(&Regressor::y(1)),
        ])
        .unwrap()
    }

    #[test]
    fn valve_four_point_rows() {
        let pts = [
            SteadyStatePoint::new(1.8, 2.112),
            SteadyStatePoint::new(3.4, 3.249),
            SteadyStatePoint::new(1.7, 2.211).on(Branch::Unloading),
            SteadyStatePoint::new(2.7, 2.843).on(Branch::Unloading),
        ];
        let cons = constraints_from_static_points(&valve_structure(), &pts).unwrap();
        assert_eq!(cons.s.shape(), (4, 8));
        for (i, p) in pts.iter().enumerate() {
            let (u, y, sg) = (p.u_bar, p.y_bar, p.branch.sign());
            let want = [y, u, 1.0, 0.0, 0.0, u * y, sg * u, sg * y];
            let got: Vec<f64> = cons.s.row(i).iter().copied().collect();
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15), "{got:?}");
        }
    }

    #[test]
    fn static_point_degenerate_rows_rejected() {
        let s = ModelStructure::from_regressors(vec![Regressor::y(1), Regressor::u(1)]).unwrap();
        assert!(matches!(
            constraints_from_static_points(&s, &[SteadyStatePoint::new(0.0, 0.0)]),
            Err(NarxError::RankDeficientConstraints { .. })
        ));
        let p = SteadyStatePoint::new(1.0, 2.0);
        assert!(constraints_from_static_points(&s, &[p, p]).is_err());
    }

    #[test]
    fn static_points_are_on_constrained_curve() {
        let s = example2_structure();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi = DMatrix::from_fn(100, 6, |_, _| rng.random_range(-1.0..1.0));
        let target = DVector::from_fn(100, |_, _| rng.random_range(-1.0..1.0));
        let prob = RegressionProblem { psi, target, row_index: 0 };
        let pts = [SteadyStatePoint::new(0.5, 1.0), SteadyStatePoint::new(1.5, 2.0)];
        let cons = constraints_from_static_points(&s, &pts).unwrap();
        let theta = constrained_least_squares(&prob, &cons).unwrap();
        assert!(cons.violation(&theta) < 1e-10);
        let model = PolynomialModel::new(s, theta).unwrap();
        for p in &pts {
            let curve = static_curve(&model, &[p.u_bar], Branch::Loading).unwrap();
            let fps = &curve[0].fixed_points;
            assert!(fps.iter().any(|f| (f.scalar() - p.y_bar).abs() < 1e-8));
        }
    }

    fn thermal_structure() -> ModelStructure {
        let (u1, u2, y1, y2) = (Regressor::u(1), Regressor::u(2), Regressor::y(1), Regressor::y(2));
        ModelStructure::from_regressors(vec![
            y1.clone(),
            u2.times(&u1),
            u1.pow(2),
            y2.clone(),
            u2.times(&y1),
            u2.times(&y2),
            u2.pow(2),
        ])
        .unwrap()
    }

    #[test]
    fn cluster_target_rows_match_thermal_matrix() {
        let targets = BTreeMap::from([
            (TermCluster::process(0, 2), 0.0615),
            (TermCluster::process(1, 1), -0.0360),
            (TermCluster::process(1, 0), 0.9128),
        ]);
        let cons = constraints_from_cluster_targets(&thermal_structure(), &targets).unwrap();
        let row = |cl: TermCluster| {
            let i = cons.notes.iter().position(|n| n.starts_with(&cl.to_string())).unwrap();
            (cons.s.row(i).iter().copied().collect::<Vec<f64>>(), cons.c[i])
        };
        assert_eq!(row(TermCluster::process(0, 2)), (vec![0., 1., 1., 0., 0., 0., 1.], 0.0615));
        assert_eq!(row(TermCluster::process(1, 1)), (vec![0., 0., 0., 0., 1., 1., 0.], -0.0360));
        assert_eq!(row(TermCluster::process(1, 0)), (vec![1., 0., 0., 1., 0., 0., 0.], 0.9128));
    }

    #[test]
    fn cluster_targets_end_to_end() {
        let s = thermal_structure();
        let targets = BTreeMap::from([
            (TermCluster::process(0, 2), 0.0615),
            (TermCluster::process(1, 1), -0.0360),
            (TermCluster::process(1, 0), 0.9128),
        ]);
        let cons = constraints_from_cluster_targets(&s, &targets).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psi = DMatrix::from_fn(80, 7, |_, _| rng.random_range(-1.0..1.0));
        let target = DVector::from_fn(80, |_, _| rng.random_range(-1.0..1.0));
        let theta = constrained_least_squares(&RegressionProblem { psi, target, row_index: 0 }, &cons).unwrap();
        let sig = cluster_coefficients(&PolynomialModel::new(s, theta).unwrap());
        for (cl, t) in &targets {
            assert!((sig[cl] - t).abs() < 1e-10);
        }
    }

    #[test]
    fn cluster_targets_single_and_missing() {
        let s = ModelStructure::from_regressors(vec![Regressor::y(1), Regressor::u(1)]).unwrap();
        let one = BTreeMap::from([(TermCluster::process(0, 1), 2.0)]);
        let cons = constraints_from_cluster_targets(&s, &one).unwrap();
        assert_eq!(cons.s.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
        let missing = BTreeMap::from([(TermCluster::process(2, 0), 2.0)]);
        assert!(constraints_from_cluster_targets(&s, &missing).is_err());
    }

    fn sf1() -> RationalTemplate {
        RationalTemplate::new(
            vec![TermCluster::process(0, 2)],
            vec![TermCluster::process(1, 0), TermCluster::process(1, 1)],
        )
        .unwrap()
    }

    fn sf1_points() -> Vec<SteadyStatePoint> {
        let truth = [0.0615, 0.9128, -0.0360];
        (0..15)
            .map(|i| {
                let u = 0.5 + 0.25 * i as f64;
                SteadyStatePoint::new(u, sf1().eval(&truth, u))
            })
            .collect()
    }

    #[test]
    fn static_template_recovers_thermal_sigmas() {
        let pin = BTreeMap::from([(TermCluster::process(1, 0), 0.9128)]);
        let fit = fit_static_targets(&sf1(), &sf1_points(), &pin).unwrap();
        assert!((fit.targets[&TermCluster::process(0, 2)] - 0.0615).abs() < 1e-6);
        assert!((fit.targets[&TermCluster::process(1, 0)] - 0.9128).abs() < 1e-6);
        assert!((fit.targets[&TermCluster::process(1, 1)] + 0.0360).abs() < 1e-6);
    }

    #[test]
    fn static_template_scale_family_is_rejected() {
        // a ū² / (1 − b − c ū) depends only on a/(1−b) and c/(1−b)
        let err = fit_static_targets(&sf1(), &sf1_points(), &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, NarxError::IllPosed(_)), "{err}");
        let pin = BTreeMap::from([(TermCluster::process(5, 0), 1.0)]);
        assert!(fit_static_targets(&sf1(), &sf1_points(), &pin).is_err());
    }

    #[test]
    fn static_template_beats_grid_search() {
        let mut pts = sf1_points();
        for (i, p) in pts.iter_mut().enumerate() {
            p.y_bar += 0.01 * ((i * 7 % 5) as f64 - 2.0);
        }
        let two = RationalTemplate::new(vec![TermCluster::process(0, 2)], vec![TermCluster::process(1, 1)]).unwrap();
        let fit = fit_static_targets(&two, &pts, &BTreeMap::new()).unwrap();
        let mut grid_min = f64::INFINITY;
        for i in -400..=400 {
            for j in -400..=400 {
                let p = [0.7 + 1e-3 * i as f64, -0.4 + 1e-3 * j as f64];
                grid_min = grid_min.min(two.cost(&p, &pts));
            }
        }
        assert!(fit.cost <= grid_min + 1e-12);
    }

    #[test]
    fn static_template_pole_is_ill_posed() {
        let t = RationalTemplate::new(vec![TermCluster::process(0, 0)], vec![TermCluster::process(1, 1)]).unwrap();
        let pts: Vec<SteadyStatePoint> = [0.0, 0.5, 1.0, 1.5, 1.9, 2.1, 2.5, 3.0]
            .iter()
            .map(|&u| SteadyStatePoint::new(u, 1.0 / (1.0 - 0.5 * u)))
            .collect();
        assert!(matches!(fit_static_targets(&t, &pts, &BTreeMap::new()), Err(NarxError::IllPosed(_))));
    }

    fn model3_structure() -> ModelStructure {
        let (y1, u1, u3) = (Regressor::y(1), Regressor::u(1), Regressor::u(3));
        ModelStructure::from_regressors(vec![
            y1.clone(),
            u1.pow(2),
            u3.times(&u1),
            u3.times(&y1),
            u3.pow(2),
            y1.pow(2),
        ])
        .unwrap()
    }

    #[test]
    fn transcritical_rows_match_worked_example() {
        let cons = constraints_transcritical(&model3_structure(), 1.0, 7.0).unwrap();
        assert_eq!(cons.c.as_slice(), &[0.0, 1.0, 0.0]);
        let want = DMatrix::from_row_slice(3, 6, &[
            0., 1., 1., 0., 1., 0., //
            1., 0., 0., 1., 0., 0., //
            0., 0., 0., 1., 0., 7.,
        ]);
        assert_eq!(cons.s, want);
    }

    #[test]
    fn dead_zone_model_satisfies_rows() {
        let theta = [0.82469, 0.25589, -0.15788, 0.17531, -0.09801, -0.02505];
        let cons = constraints_transcritical(&model3_structure(), 1.0, 7.0).unwrap();
        assert!(cons.violation(&theta) < 5e-5);
    }

    #[test]
    fn transcritical_rejections() {
        assert!(constraints_transcritical(&model3_structure(), 1.0, 0.0).is_err());
        let with_u = model3_structure().with_regressor(Regressor::u(1)).unwrap();
        assert!(constraints_transcritical(&with_u, 1.0, 7.0).is_err());
        let s = ModelStructure::from_regressors(vec![Regressor::y(1), Regressor::u(1).pow(2)]).unwrap();
        assert!(constraints_transcritical(&s, 1.0, 7.0).is_err());
    }

    #[test]
    fn transcritical_geometry_is_exact_after_cls() {
        let s = model3_structure();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (u_c, alpha) in [(1.0, 7.0), (0.5, -2.0), (2.0, 3.0)] {
            let psi = DMatrix::from_fn(60, 6, |_, _| rng.random_range(-1.0..1.0));
            let target = DVector::from_fn(60, |_, _| rng.random_range(-1.0..1.0));
            let cons = constraints_transcritical(&s, u_c, alpha).unwrap();
            let theta = constrained_least_squares(&RegressionProblem { psi, target, row_index: 0 }, &cons).unwrap();
            let m = PolynomialModel::new(s.clone(), theta).unwrap();
            let (uc, a) = transcritical_geometry(&steady_state_relation(&m, Branch::Loading)).unwrap();
            assert!((uc - u_c).abs() < 1e-8 && (a - alpha).abs() < 1e-8);
        }
    }

    fn robot_structure() -> PlanarStructure {
        let t = PlanarTerm::new;
        PlanarStructure {
            eq1: vec![t(1, 0), t(0, 1), t(3, 0), t(0, 2), t(0, 3), t(1, 1), t(2, 1), t(2, 0)],
            eq2: vec![t(0, 1), t(3, 0), t(1, 1), t(0, 2), t(2, 1), t(1, 0), t(0, 3), t(2, 0), t(1, 2)],
        }
    }

    #[test]
    fn origin_fixed_point_is_vacuous() {
        let cons = constraints_fixed_point(&robot_structure(), [0.0, 0.0]).unwrap();
        assert!(cons.is_empty());
        let with_const = PlanarStructure {
            eq1: vec![PlanarTerm::new(0, 1)],
            eq2: vec![PlanarTerm::new(0, 1)],
        };
        assert!(constraints_fixed_point(&with_const, [1.0, 0.0]).is_err());
    }

    #[test]
    fn imposed_fixed_point_has_zero_residual() {
        let structure = robot_structure();
        let truth = PlanarModel::new(
            structure.clone(),
            vec![
                0.983506, 0.096590, -0.000078, 0.005253, -0.000538, -0.016513, -0.000300, -0.004126,
                0.779775, -0.000042, -0.015285, -0.002493, -0.000216, -0.004130, -0.000102, -0.001130, 0.000001,
            ],
        )
        .unwrap();
        let trajs: Vec<Vec<[f64; 2]>> = [[5.0, 3.0], [-4.0, 2.0], [3.0, -5.0]]
            .iter()
            .map(|&y0| truth.trajectory(y0, 150))
            .collect();
        let (psi, target) = structure.regression(&trajs).unwrap();
        let prob = RegressionProblem { psi, target, row_index: 0 };
        let target_pt = [-0.3, 0.1];
        let cons = constraints_fixed_point(&structure, target_pt).unwrap();
        let theta = constrained_least_squares(&prob, &cons).unwrap();
        let m = PlanarModel::new(structure, theta).unwrap();
        assert!(m.fixed_point_residual(target_pt) < 1e-9);
    }

    #[test]
    fn pruning_thermal_policy() {
        let meta = MetaParams::new(2, 2, 0, 3, 1).unwrap();
        let cands = generate_candidates(&meta, CandidateOptions { constant: true, ..Default::default() });
        let forbidden: Vec<TermCluster> = TermCluster::all_process(3)
            .into_iter()
            .filter(|c| c.p > 1 || (c.p == 0 && c.m == 3))
            .collect();
        let (kept, removed) = prune_clusters(&cands, &forbidden).unwrap();
        let brute = cands
            .iter()
            .filter(|r| {
                let c = cluster_of(r);
                !(c.p > 1 || (c.p == 0 && c.m == 3))
            })
            .count();
        assert_eq!(kept.len(), brute);
        assert_eq!(removed, cands.len() - brute);
        assert!(kept.iter().all(|r| {
            let c = cluster_of(r);
            c.p <= 1 && !(c.p == 0 && c.m == 3)
        }));
        let (again, zero) = prune_clusters(&kept, &forbidden).unwrap();
        assert_eq!(again, kept);
        assert_eq!(zero, 0);
        assert_eq!(prune_clusters(&cands, &[]).unwrap().0, cands);
        assert!(prune_clusters(&[Regressor::y(1)], &[TermCluster::process(1, 0)]).is_err());
    }

    #[test]
    fn completing_required_clusters() {
        let cands = vec![Regressor::y(2).pow(2), Regressor::y(1).pow(2), Regressor::y(1)];
        let out = complete_clusters(&[Regressor::y(1)], &cands, &[TermCluster::process(1, 0), TermCluster::process(2, 0)]).unwrap();
        assert_eq!(out, vec![Regressor::y(1), Regressor::y(1).pow(2)]);
        assert!(complete_clusters(&[], &cands, &[TermCluster::process(0, 1)]).is_err());
    }

    #[test]
    fn steady_state_pair_fits_static_data() {
        let s = ModelStructure::from_regressors(vec![Regressor::y(1), Regressor::u(1)]).unwrap();
        let pts: Vec<SteadyStatePoint> = (0..5).map(|i| SteadyStatePoint::new(i as f64, 2.0 * i as f64)).collect();
        let pair = steady_state_pair(&s, &pts, 1.0).unwrap();
        // Any θ with θ_u / (1 − θ_y) = 2 fits; check the residual of one.
        assert!(pair.cost(&[0.5, 1.0]) < 1e-24);
    }
}
