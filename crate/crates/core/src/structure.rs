//! Polynomial regressors, candidate generation and term-cluster algebra.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{NarxError, Result};

/// Signal a regressor factor is taken from.
///
/// Declaration order is the canonical kind priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VarKind {
    #[serde(rename = "y")]
    Output,
    #[serde(rename = "u")]
    Input,
    /// First difference `u(k) - u(k-1)`.
    #[serde(rename = "u2")]
    InputDiff,
    /// `sign(u(k) - u(k-1))`.
    #[serde(rename = "u3")]
    InputSign,
    #[serde(rename = "e")]
    Noise,
}

impl VarKind {
    pub fn symbol(self) -> &'static str {
        match self {
            VarKind::Output => "y",
            VarKind::Input => "u",
            VarKind::InputDiff => "u2",
            VarKind::InputSign => "u3",
            VarKind::Noise => "e",
        }
    }

    fn is_hysteresis(self) -> bool {
        matches!(self, VarKind::InputDiff | VarKind::InputSign)
    }
}

/// One factor `kind(k - lag)^exp` of a monomial; serialized as `["y", 1, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Factor(pub VarKind, pub usize, pub u32);

impl Factor {
    pub fn kind(&self) -> VarKind {
        self.0
    }
    pub fn lag(&self) -> usize {
        self.1
    }
    pub fn exp(&self) -> u32 {
        self.2
    }
}

/// A monomial in lagged variables. The empty monomial is the constant term.
///
/// Factors are kept sorted by (kind, lag) with merged exponents, so derived
/// equality is structural.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Factor>", into = "Vec<Factor>")]
pub struct Regressor {
    factors: Vec<Factor>,
}

impl TryFrom<Vec<Factor>> for Regressor {
    type Error = NarxError;
    fn try_from(factors: Vec<Factor>) -> Result<Self> {
        if factors.iter().any(|f| f.lag() == 0) {
            return Err(NarxError::invalid("regressor lags must be at least 1"));
        }
        Ok(Regressor::new(factors))
    }
}

impl From<Regressor> for Vec<Factor> {
    fn from(r: Regressor) -> Self {
        r.factors
    }
}

impl Regressor {
    pub fn new(mut factors: Vec<Factor>) -> Self {
        factors.retain(|f| f.exp() > 0);
        factors.sort_by_key(|f| (f.kind(), f.lag()));
        let mut merged: Vec<Factor> = Vec::with_capacity(factors.len());
        for f in factors {
            match merged.last_mut() {
                Some(last) if last.kind() == f.kind() && last.lag() == f.lag() => last.2 += f.exp(),
                _ => merged.push(f),
            }
        }
        Regressor { factors: merged }
    }

    pub fn constant() -> Self {
        Regressor { factors: Vec::new() }
    }

    /// Single linear factor `kind(k - lag)`.
    pub fn linear(kind: VarKind, lag: usize) -> Self {
        Regressor::new(vec![Factor(kind, lag, 1)])
    }

    pub fn y(lag: usize) -> Self {
        Regressor::linear(VarKind::Output, lag)
    }

    pub fn u(lag: usize) -> Self {
        Regressor::linear(VarKind::Input, lag)
    }

    pub fn e(lag: usize) -> Self {
        Regressor::linear(VarKind::Noise, lag)
    }

    /// Product of two monomials.
    pub fn times(&self, other: &Regressor) -> Regressor {
        Regressor::new(self.factors.iter().chain(&other.factors).copied().collect())
    }

    pub fn pow(&self, exp: u32) -> Regressor {
        Regressor::new(self.factors.iter().map(|f| Factor(f.0, f.1, f.2 * exp)).collect())
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn is_constant(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.factors.iter().map(|f| f.exp()).sum()
    }

    /// Degree counted over output and input factors only.
    pub fn process_degree(&self) -> u32 {
        self.factors
            .iter()
            .filter(|f| matches!(f.kind(), VarKind::Output | VarKind::Input))
            .map(|f| f.exp())
            .sum()
    }

    pub fn has_kind(&self, kind: VarKind) -> bool {
        self.factors.iter().any(|f| f.kind() == kind)
    }

    pub fn has_noise(&self) -> bool {
        self.has_kind(VarKind::Noise)
    }

    /// Oldest sample index the regressor reaches back to; the difference and
    /// sign variables need one extra input sample.
    pub fn max_lag(&self) -> usize {
        self.factors
            .iter()
            .map(|f| f.lag() + usize::from(f.kind().is_hysteresis()))
            .max()
            .unwrap_or(0)
    }

    /// Evaluates the monomial given the value of each lagged variable.
    pub fn eval(&self, mut value: impl FnMut(VarKind, usize) -> f64) -> f64 {
        self.factors
            .iter()
            .map(|f| value(f.kind(), f.lag()).powi(f.exp() as i32))
            .product()
    }

    /// Partial derivative with respect to `kind(k - lag)`.
    pub fn derivative(&self, kind: VarKind, lag: usize, mut value: impl FnMut(VarKind, usize) -> f64) -> f64 {
        let Some(pos) = self
            .factors
            .iter()
            .position(|f| f.kind() == kind && f.lag() == lag)
        else {
            return 0.0;
        };
        self.factors
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let v = value(f.kind(), f.lag());
                if i == pos {
                    f.exp() as f64 * v.powi(f.exp() as i32 - 1)
                } else {
                    v.powi(f.exp() as i32)
                }
            })
            .product()
    }
}

impl Ord for Regressor {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.factors.cmp(&other.factors))
    }
}

impl PartialOrd for Regressor {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Regressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return f.write_str("1");
        }
        for (i, fac) in self.factors.iter().enumerate() {
            if i > 0 {
                f.write_str("*")?;
            }
            write!(f, "{}(k-{})", fac.kind().symbol(), fac.lag())?;
            if fac.exp() > 1 {
                write!(f, "^{}", fac.exp())?;
            }
        }
        Ok(())
    }
}

/// Lag and degree bounds of a model class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaParams {
    pub ny: usize,
    pub nu: usize,
    #[serde(default)]
    pub ne: usize,
    pub ell: u32,
    #[serde(default = "one")]
    pub d: usize,
}

fn one() -> usize {
    1
}

impl MetaParams {
    pub fn new(ny: usize, nu: usize, ne: usize, ell: u32, d: usize) -> Result<Self> {
        let meta = MetaParams { ny, nu, ne, ell, d };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ell == 0 {
            return Err(NarxError::invalid("nonlinearity degree must be at least 1"));
        }
        if self.d == 0 {
            return Err(NarxError::invalid("input delay must be at least 1"));
        }
        if self.nu != 0 && self.nu + 1 < self.d {
            return Err(NarxError::invalid(format!(
                "input lag bound {} below delay {}",
                self.nu, self.d
            )));
        }
        Ok(())
    }

    /// Parses `"ny=3,nu=3,l=3,d=1"` (keys `ny nu ne l|ell d`).
    pub fn parse(spec: &str) -> Result<Self> {
        let mut meta = MetaParams { ny: 0, nu: 0, ne: 0, ell: 1, d: 1 };
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| NarxError::invalid(format!("expected key=value, got {part:?}")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| NarxError::invalid(format!("bad value in {part:?}")))?;
            match key.trim() {
                "ny" => meta.ny = value,
                "nu" => meta.nu = value,
                "ne" => meta.ne = value,
                "l" | "ell" => meta.ell = value as u32,
                "d" => meta.d = value,
                other => return Err(NarxError::invalid(format!("unknown meta key {other:?}"))),
            }
        }
        meta.validate()?;
        Ok(meta)
    }

    fn admits(&self, r: &Regressor) -> bool {
        r.factors().iter().all(|f| match f.kind() {
            VarKind::Output => (1..=self.ny).contains(&f.lag()),
            VarKind::Input | VarKind::InputDiff | VarKind::InputSign => {
                (self.d..=self.nu.max(self.d)).contains(&f.lag())
            }
            VarKind::Noise => (1..=self.ne).contains(&f.lag()),
        }) && r.process_degree() <= self.ell
    }

    fn input_lags(&self) -> std::ops::RangeInclusive<usize> {
        if self.nu >= self.d {
            self.d..=self.nu
        } else {
            #[allow(clippy::reversed_empty_ranges)]
            {
                1..=0
            }
        }
    }
}

/// Switches for [`generate_candidates`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateOptions {
    pub constant: bool,
    pub noise: bool,
    pub hysteresis: bool,
    /// Let noise variables enter nonlinear monomials (off: linear `e(k-i)` only).
    pub nonlinear_noise: bool,
}

/// All monomials of degree `1..=ell` over the admissible lagged variables, in
/// canonical order.
pub fn generate_candidates(meta: &MetaParams, opts: CandidateOptions) -> Vec<Regressor> {
    let mut vars: Vec<Regressor> = (1..=meta.ny).map(Regressor::y).collect();
    vars.extend(meta.input_lags().map(Regressor::u));
    let process_vars = vars.clone();
    if opts.noise && opts.nonlinear_noise {
        vars.extend((1..=meta.ne).map(Regressor::e));
    }

    let mut out = Vec::new();
    if opts.constant {
        out.push(Regressor::constant());
    }
    let mut stack: Vec<(usize, Regressor, u32)> = vec![(0, Regressor::constant(), 0)];
    while let Some((start, mono, deg)) = stack.pop() {
        if deg == meta.ell {
            continue;
        }
        for (i, v) in vars.iter().enumerate().skip(start) {
            let next = mono.times(v);
            out.push(next.clone());
            stack.push((i, next, deg + 1));
        }
    }
    if opts.noise && !opts.nonlinear_noise {
        out.extend((1..=meta.ne).map(Regressor::e));
    }
    if opts.hysteresis {
        for lag in meta.input_lags() {
            for kind in [VarKind::InputDiff, VarKind::InputSign] {
                let h = Regressor::linear(kind, lag);
                out.extend(process_vars.iter().map(|p| h.times(p)));
                out.push(h);
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Provenance of a cluster beyond its (output, input) exponent signature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterTag {
    #[default]
    Process,
    /// Contains the input difference `u2`.
    U2,
    /// Contains the input sign `u3` (and no `u2`).
    U3,
    /// Contains a noise variable.
    Noise,
}

/// Term cluster: regressors sharing output exponent `p` and input exponent `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TermCluster {
    pub p: u32,
    pub m: u32,
    #[serde(default)]
    pub tag: ClusterTag,
}

impl TermCluster {
    pub const fn process(p: u32, m: u32) -> Self {
        TermCluster { p, m, tag: ClusterTag::Process }
    }

    /// Every process cluster with `1 <= p + m <= ell`, plus the constant.
    pub fn all_process(ell: u32) -> Vec<TermCluster> {
        let mut out = Vec::new();
        for deg in 0..=ell {
            for p in 0..=deg {
                out.push(TermCluster::process(p, deg - p));
            }
        }
        out
    }
}

impl fmt::Display for TermCluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (sym, e) in [("y", self.p), ("u", self.m)] {
            match e {
                0 => {}
                1 => parts.push(sym.to_string()),
                _ => parts.push(format!("{sym}^{e}")),
            }
        }
        let body = if parts.is_empty() { "0".to_string() } else { parts.join(" ") };
        match self.tag {
            ClusterTag::Process => write!(f, "Omega[{body}]"),
            ClusterTag::U2 => write!(f, "Omega[{body} | u2]"),
            ClusterTag::U3 => write!(f, "Omega[{body} | u3]"),
            ClusterTag::Noise => write!(f, "Omega[{body} | e]"),
        }
    }
}

pub fn cluster_of(r: &Regressor) -> TermCluster {
    let mut p = 0;
    let mut m = 0;
    for f in r.factors() {
        match f.kind() {
            VarKind::Output => p += f.exp(),
            VarKind::Input => m += f.exp(),
            _ => {}
        }
    }
    let tag = if r.has_kind(VarKind::Noise) {
        ClusterTag::Noise
    } else if r.has_kind(VarKind::InputDiff) {
        ClusterTag::U2
    } else if r.has_kind(VarKind::InputSign) {
        ClusterTag::U3
    } else {
        ClusterTag::Process
    };
    TermCluster { p, m, tag }
}

/// An ordered, duplicate-free set of regressors with its model-class bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StructureFile", into = "StructureFile")]
pub struct ModelStructure {
    meta: MetaParams,
    regressors: Vec<Regressor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StructureFile {
    meta: MetaParams,
    regressors: Vec<Regressor>,
}

impl TryFrom<StructureFile> for ModelStructure {
    type Error = NarxError;
    fn try_from(f: StructureFile) -> Result<Self> {
        ModelStructure::new(f.meta, f.regressors)
    }
}

impl From<ModelStructure> for StructureFile {
    fn from(s: ModelStructure) -> Self {
        StructureFile {
            meta: s.meta,
            regressors: s.regressors,
        }
    }
}

impl ModelStructure {
    pub fn new(meta: MetaParams, regressors: Vec<Regressor>) -> Result<Self> {
        meta.validate()?;
        for (i, r) in regressors.iter().enumerate() {
            if regressors[..i].contains(r) {
                return Err(NarxError::invalid(format!("duplicate regressor {r}")));
            }
            if !meta.admits(r) {
                return Err(NarxError::invalid(format!("regressor {r} violates model bounds")));
            }
        }
        Ok(ModelStructure { meta, regressors })
    }

    /// Builds a structure whose bounds are the tightest ones admitting `regressors`.
    pub fn from_regressors(regressors: Vec<Regressor>) -> Result<Self> {
        let mut meta = MetaParams { ny: 0, nu: 0, ne: 0, ell: 1, d: usize::MAX };
        for f in regressors.iter().flat_map(|r| r.factors()) {
            match f.kind() {
                VarKind::Output => meta.ny = meta.ny.max(f.lag()),
                VarKind::Noise => meta.ne = meta.ne.max(f.lag()),
                _ => {
                    meta.nu = meta.nu.max(f.lag());
                    meta.d = meta.d.min(f.lag());
                }
            }
        }
        if meta.d == usize::MAX {
            meta.d = 1;
        }
        meta.ell = regressors.iter().map(Regressor::process_degree).max().unwrap_or(1).max(1);
        ModelStructure::new(meta, regressors)
    }

    pub fn meta(&self) -> &MetaParams {
        &self.meta
    }

    pub fn regressors(&self) -> &[Regressor] {
        &self.regressors
    }

    pub fn len(&self) -> usize {
        self.regressors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regressors.is_empty()
    }

    pub fn max_lag(&self) -> usize {
        self.regressors.iter().map(Regressor::max_lag).max().unwrap_or(0)
    }

    pub fn output_order(&self) -> usize {
        self.regressors
            .iter()
            .flat_map(|r| r.factors())
            .filter(|f| f.kind() == VarKind::Output)
            .map(|f| f.lag())
            .max()
            .unwrap_or(0)
    }

    pub fn has_noise(&self) -> bool {
        self.regressors.iter().any(Regressor::has_noise)
    }

    pub fn position(&self, r: &Regressor) -> Option<usize> {
        self.regressors.iter().position(|x| x == r)
    }

    /// Structure restricted to the regressors for which `keep` holds.
    pub fn filtered(&self, keep: impl Fn(&Regressor) -> bool) -> ModelStructure {
        ModelStructure {
            meta: self.meta,
            regressors: self.regressors.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn with_regressor(&self, r: Regressor) -> Result<ModelStructure> {
        let mut regs = self.regressors.clone();
        regs.push(r);
        ModelStructure::new(self.meta, regs)
    }
}

/// Model structure plus parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct PolynomialModel {
    structure: ModelStructure,
    theta: Vec<f64>,
}

/// On-disk model layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    meta: MetaParams,
    regressors: Vec<Regressor>,
    theta: Vec<f64>,
    #[serde(default)]
    noise_terms_flag: bool,
}

impl TryFrom<ModelFile> for PolynomialModel {
    type Error = NarxError;
    fn try_from(f: ModelFile) -> Result<Self> {
        PolynomialModel::new(ModelStructure::new(f.meta, f.regressors)?, f.theta)
    }
}

impl From<PolynomialModel> for ModelFile {
    fn from(m: PolynomialModel) -> Self {
        ModelFile {
            noise_terms_flag: m.structure.has_noise(),
            meta: m.structure.meta,
            regressors: m.structure.regressors,
            theta: m.theta,
        }
    }
}

impl PolynomialModel {
    pub fn new(structure: ModelStructure, theta: Vec<f64>) -> Result<Self> {
        if structure.len() != theta.len() {
            return Err(NarxError::invalid(format!(
                "{} regressors but {} parameters",
                structure.len(),
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(NarxError::invalid("non-finite parameter"));
        }
        Ok(PolynomialModel { structure, theta })
    }

    /// Convenience constructor from `(regressor, parameter)` pairs.
    pub fn from_terms(terms: Vec<(Regressor, f64)>) -> Result<Self> {
        let (regs, theta): (Vec<_>, Vec<_>) = terms.into_iter().unzip();
        PolynomialModel::new(ModelStructure::from_regressors(regs)?, theta)
    }

    pub fn structure(&self) -> &ModelStructure {
        &self.structure
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn regressors(&self) -> &[Regressor] {
        self.structure.regressors()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Regressor, f64)> {
        self.structure.regressors().iter().zip(self.theta.iter().copied())
    }

    /// Model output given the lagged-variable values; noise terms are skipped.
    pub fn eval_deterministic(&self, mut value: impl FnMut(VarKind, usize) -> f64) -> f64 {
        self.terms()
            .filter(|(r, _)| !r.has_noise())
            .map(|(r, t)| t * r.eval(&mut value))
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable equation, one term per line.
    pub fn render(&self) -> String {
        let mut out = String::from("y(k) =");
        for (r, t) in self.terms() {
            out.push_str(&format!("\n  {t:+.6e} * {r}"));
        }
        out
    }
}

/// Cluster coefficients: the sum of parameters per term cluster.
pub fn cluster_coefficients(model: &PolynomialModel) -> BTreeMap<TermCluster, f64> {
    let mut out = BTreeMap::new();
    for (r, t) in model.terms() {
        *out.entry(cluster_of(r)).or_insert(0.0) += t;
    }
    out
}

/// Input difference and its sign. Index 0 is undefined and holds NaN; the
/// regression builders never read it.
pub fn hysteresis_variables(u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.len() < 2 {
        return Err(NarxError::InsufficientData {
            needed: 1,
            available: u.len(),
        });
    }
    let mut u2 = vec![f64::NAN; u.len()];
    let mut u3 = vec![f64::NAN; u.len()];
    for k in 1..u.len() {
        u2[k] = u[k] - u[k - 1];
        u3[k] = sign(u2[k]);
    }
    Ok((u2, u3))
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
