//! Residual correlation tests, free-run metrics and Pareto model picking.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use crate::dataset::TimeSeries;
use crate::dynamics::{predict_osa, simulate_free_run};
use crate::error::{NarxError, Result};
use crate::estimators::ParetoPoint;
use crate::structure::{ModelStructure, PolynomialModel};

/// Pointwise band multiplier for normalized correlations.
pub const BAND_Z: f64 = 1.96;
/// Probability of a lag falling outside the band on white data.
const LAG_ALPHA: f64 = 0.05;
/// Per-rule false-alarm budget; a test fails if either rule fires.
const RULE_ALPHA: f64 = 0.04;

/// Named residual correlation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualTestKind {
    /// `ρ_ξξ(τ)`, τ = 1..τ_max
    Whiteness,
    /// `ρ_uξ(τ)`, |τ| ≤ τ_max
    InputResidual,
    /// `ρ_(u²)'ξ(τ)`, |τ| ≤ τ_max
    InputSquaredResidual,
    /// `ρ_(u²)'ξ²(τ)`, |τ| ≤ τ_max
    InputSquaredResidualSquared,
    /// `ρ_ξ(ξu)(τ)`, τ = 0..τ_max, with the product lagged one extra step
    ResidualResidualInput,
}

impl ResidualTestKind {
    pub const ALL: [ResidualTestKind; 5] = [
        ResidualTestKind::Whiteness,
        ResidualTestKind::InputResidual,
        ResidualTestKind::InputSquaredResidual,
        ResidualTestKind::InputSquaredResidualSquared,
        ResidualTestKind::ResidualResidualInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResidualTestKind::Whiteness => "rho_xi_xi",
            ResidualTestKind::InputResidual => "rho_u_xi",
            ResidualTestKind::InputSquaredResidual => "rho_u2_xi",
            ResidualTestKind::InputSquaredResidualSquared => "rho_u2_xi2",
            ResidualTestKind::ResidualResidualInput => "rho_xi_xiu",
        }
    }
}

/// One correlation trace with its band and verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualTest {
    pub kind: ResidualTestKind,
    pub lags: Vec<i64>,
    pub values: Vec<f64>,
    /// Half-width of the 95% band, `1.96/√N`.
    pub band: f64,
    pub outside: usize,
    /// Largest number of excursions tolerated for this many lags.
    pub allowed_outside: usize,
    pub pass: bool,
    /// Residuals (or the input) had zero variance; the test passes trivially.
    pub vacuous: bool,
}

fn centred(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

/// Normalized cross-correlation `Σ a(k) b(k−τ) / √(Σa² Σb²)` of
/// already-centred signals; `None` if either has zero energy.
pub fn normalized_correlation(a: &[f64], b: &[f64], tau: i64) -> Option<f64> {
    let n = a.len().min(b.len());
    let ea: f64 = a[..n].iter().map(|v| v * v).sum();
    let eb: f64 = b[..n].iter().map(|v| v * v).sum();
    if ea == 0.0 || eb == 0.0 {
        return None;
    }
    let s: f64 = if tau >= 0 {
        let t = tau as usize;
        (t..n).map(|k| a[k] * b[k - t]).sum()
    } else {
        let t = (-tau) as usize;
        (t..n).map(|k| a[k - t] * b[k]).sum()
    };
    Some(s / (ea * eb).sqrt())
}

/// Excursion count tolerated over `lags` lags: the smallest `q` with
/// `P(Binomial(lags, 0.05) > q) ≤ 0.04`.
pub fn allowed_excursions(lags: usize) -> usize {
    let b = Binomial::new(LAG_ALPHA, lags as u64).expect("valid binomial");
    (0..=lags).find(|&q| b.sf(q as u64) <= RULE_ALPHA).unwrap_or(lags)
}

/// Bound on `max |ρ|` (in units of `1/√N`) with family-wise level 0.04.
pub fn max_excursion_z(lags: usize) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(1.0 - RULE_ALPHA / (2.0 * lags as f64))
}

/// Battery of five residual correlation tests with a 95% band `±1.96/√N`.
///
/// A test fails when more lags leave the band than a white sequence would
/// produce with probability 0.96, or when a single lag exceeds the
/// Bonferroni bound for the whole trace.
pub fn residual_tests(xi: &[f64], u: &[f64], tau_max: usize) -> Result<Vec<ResidualTest>> {
    let n = xi.len();
    if u.len() != n {
        return Err(NarxError::invalid(format!("residuals have {n} samples, input {}", u.len())));
    }
    if tau_max == 0 || 4 * tau_max >= n {
        return Err(NarxError::invalid(format!("tau_max = {tau_max} must satisfy 0 < tau_max < N/4 = {}", n / 4)));
    }
    if xi.iter().chain(u).any(|v| !v.is_finite()) {
        return Err(NarxError::invalid("non-finite residual or input"));
    }
    let band = BAND_Z / (n as f64).sqrt();
    let xi_c = centred(xi);
    let u_c = centred(u);
    let u2: Vec<f64> = centred(&u.iter().map(|v| v * v).collect::<Vec<_>>());
    let xi2: Vec<f64> = centred(&xi_c.iter().map(|v| v * v).collect::<Vec<_>>());
    // ξ(k−1)u(k−1), so that lag τ below reads ξ(k) against ξu at k−1−τ
    let mut xiu = vec![0.0; n];
    for k in 1..n {
        xiu[k] = xi_c[k - 1] * u_c[k - 1];
    }
    let xiu = centred(&xiu);

    let sym: Vec<i64> = (-(tau_max as i64)..=tau_max as i64).collect();
    let plan: [(ResidualTestKind, &[f64], &[f64], Vec<i64>); 5] = [
        (ResidualTestKind::Whiteness, &xi_c, &xi_c, (1..=tau_max as i64).collect()),
        (ResidualTestKind::InputResidual, &xi_c, &u_c, sym.clone()),
        (ResidualTestKind::InputSquaredResidual, &xi_c, &u2, sym.clone()),
        (ResidualTestKind::InputSquaredResidualSquared, &xi2, &u2, sym),
        (ResidualTestKind::ResidualResidualInput, &xi_c, &xiu, (0..=tau_max as i64).collect()),
    ];
    Ok(plan
        .into_iter()
        .map(|(kind, a, b, lags)| {
            let allowed_outside = allowed_excursions(lags.len());
            let values: Option<Vec<f64>> = lags.iter().map(|&t| normalized_correlation(a, b, t)).collect();
            match values {
                None => ResidualTest {
                    kind,
                    values: vec![0.0; lags.len()],
                    lags,
                    band,
                    outside: 0,
                    allowed_outside,
                    pass: true,
                    vacuous: true,
                },
                Some(values) => {
                    let outside = values.iter().filter(|v| v.abs() > band).count();
                    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let cap = max_excursion_z(lags.len()) / (n as f64).sqrt();
                    ResidualTest {
                        kind,
                        pass: outside <= allowed_outside && max <= cap,
                        values,
                        lags,
                        band,
                        outside,
                        allowed_outside,
                        vacuous: false,
                    }
                }
            }
        })
        .collect())
}

/// Error metrics of a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mse: f64,
    /// Percent; `None` when `y` has a zero sample.
    pub mape: Option<f64>,
}

pub fn metrics(y: &[f64], y_hat: &[f64]) -> Result<Metrics> {
    if y.len() != y_hat.len() {
        return Err(NarxError::invalid(format!("lengths differ: {} vs {}", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(NarxError::invalid("metrics of an empty series"));
    }
    let n = y.len() as f64;
    let mse = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let mape = if y.iter().any(|v| *v == 0.0) {
        None
    } else {
        Some(100.0 * y.iter().zip(y_hat).map(|(a, b)| ((a - b) / a).abs()).sum::<f64>() / n)
    };
    Ok(Metrics {
        rmse: mse.sqrt(),
        mse,
        mape,
    })
}

/// `|mean(η ŷ)|` for a free-run output `ŷ` and its error `η = y − ŷ`.
pub fn j_corr_signals(y: &[f64], y_sim: &[f64]) -> f64 {
    let n = y.len().min(y_sim.len());
    if n == 0 {
        return f64::INFINITY;
    }
    (y.iter().zip(y_sim).map(|(a, b)| (a - b) * b).sum::<f64>() / n as f64).abs()
}

/// Correlation cost of a model's free run on `ts`, started from the measured
/// outputs before `max_lag`; `+∞` if the run diverges.
pub fn j_corr(model: &PolynomialModel, ts: &TimeSeries) -> f64 {
    let start = model.structure().max_lag();
    if start >= ts.len() {
        return f64::INFINITY;
    }
    match simulate_free_run(model, ts.u(), &ts.y()[..start.max(model.structure().output_order())]) {
        Ok(run) if !run.diverged() => j_corr_signals(&ts.y()[start..], &run.y[start..]),
        _ => f64::INFINITY,
    }
}

/// Picked Pareto point and every point's `J_corr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPick {
    pub index: usize,
    pub point: ParetoPoint,
    pub j_corr: Vec<f64>,
}

/// Argmin of `J_corr` over a sweep; ties within 1e-12 go to the larger λ.
pub fn pick_from_pareto(points: &[ParetoPoint], structure: &ModelStructure, ts: &TimeSeries) -> Result<ParetoPick> {
    if points.is_empty() {
        return Err(NarxError::invalid("empty Pareto sweep"));
    }
    let scores: Vec<f64> = points
        .par_iter()
        .map(|p| {
            PolynomialModel::new(structure.clone(), p.theta.clone())
                .map(|m| j_corr(&m, ts))
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let sb = scores[b];
                if s < sb - 1e-12 || ((s - sb).abs() <= 1e-12 && points[i].lambda > points[b].lambda) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    let Some(index) = best else {
        return Err(NarxError::Diverged {
            iterations: points.len(),
            message: "every Pareto point diverges in free run".into(),
        });
    };
    Ok(ParetoPick {
        index,
        point: points[index].clone(),
        j_corr: scores,
    })
}

/// Residuals on the valid row range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector {
    /// One-step-ahead residual `y − ŷ₁`.
    pub xi: Vec<f64>,
    /// Free-run error `y − ŷ_s`.
    pub eta: Vec<f64>,
}

/// Everything needed to judge a model on one data set. Ranking figures
/// (`rmse`, `mape`, `j_corr`) come from the free run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub start: usize,
    pub rmse: f64,
    pub mse: f64,
    pub mape: Option<f64>,
    pub ms1pe: f64,
    pub msse: f64,
    pub j_corr: f64,
    pub residual_tests: Vec<ResidualTest>,
    pub y: Vec<f64>,
    pub y_osa: Vec<f64>,
    pub y_free: Vec<f64>,
}

impl ValidationReport {
    pub fn residuals(&self) -> ResidualVector {
        let s = self.start;
        ResidualVector {
            xi: self.y[s..].iter().zip(&self.y_osa[s..]).map(|(a, b)| a - b).collect(),
            eta: self.y[s..].iter().zip(&self.y_free[s..]).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn all_tests_pass(&self) -> bool {
        self.residual_tests.iter().all(|t| t.pass)
    }
}

/// Free-run and one-step validation of `model` on `ts`.
pub fn validate(model: &PolynomialModel, ts: &TimeSeries, tau_max: usize) -> Result<ValidationReport> {
    let start = model.structure().max_lag();
    let y_osa = predict_osa(model, ts)?;
    let init = &ts.y()[..start.max(model.structure().output_order())];
    let run = simulate_free_run(model, ts.u(), init)?;
    if let Some(k) = run.diverged_at {
        return Err(NarxError::Diverged {
            iterations: k,
            message: "free run left the finite range".into(),
        });
    }
    let y = ts.y()[start..].to_vec();
    let m = metrics(&y, &run.y[start..])?;
    let one = metrics(&y, &y_osa[start..])?;
    let xi: Vec<f64> = y.iter().zip(&y_osa[start..]).map(|(a, b)| a - b).collect();
    Ok(ValidationReport {
        start,
        rmse: m.rmse,
        mse: m.mse,
        mape: m.mape,
        ms1pe: one.mse,
        msse: m.mse,
        j_corr: j_corr_signals(&y, &run.y[start..]),
        residual_tests: residual_tests(&xi, &ts.u()[start..], tau_max)?,
        y: ts.y().to_vec(),
        y_osa,
        y_free: run.y,
    })
}
