//! Forward structure selection by error reduction ratio (one-step error),
//! simulation error reduction ratio and simulation correntropy, with
//! information-criterion stopping.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeries;
use crate::dynamics::{simulate_free_run_with, SimOptions};
use crate::error::{NarxError, Result};
use crate::estimators::{build_regression_from, least_squares};
use crate::linalg::RANK_TOL;
use crate::structure::{ModelStructure, PolynomialModel, Regressor};

/// Criterion driving a forward selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Err,
    Srr,
    Ssmr,
}

impl SelectionMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "err" => Ok(SelectionMethod::Err),
            "srr" => Ok(SelectionMethod::Srr),
            "ssmr" => Ok(SelectionMethod::Ssmr),
            other => Err(NarxError::invalid(format!("unknown selection method {other:?}"))),
        }
    }
}

/// One accepted regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub regressor: Regressor,
    pub criterion: f64,
    /// MS1PE of the model after this step.
    pub ms1pe: f64,
    /// MSSE of the model after this step (simulation-based paths only).
    pub msse: Option<f64>,
}

/// Ordered picks of a forward selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub method: SelectionMethod,
    pub steps: Vec<SelectionStep>,
    /// Mean square of the target over the regression rows: the error of the
    /// empty model, used as normalizer.
    pub sigma_y2: f64,
    /// First time index of the common regression rows.
    pub start: usize,
    /// Rows used for every fit.
    pub n_rows: usize,
    /// Chosen model size; the full trace is kept so it can be overridden.
    pub stop_index: usize,
    /// Why the forward loop ended early, if it did.
    pub early_stop: Option<String>,
}

impl SelectionTrace {
    pub fn regressors(&self, k: usize) -> Vec<Regressor> {
        self.steps.iter().take(k).map(|s| s.regressor.clone()).collect()
    }

    /// Structure of the first `stop_index` picks.
    pub fn selected(&self) -> Result<ModelStructure> {
        ModelStructure::from_regressors(self.regressors(self.stop_index))
    }

    pub fn criterion_sum(&self) -> f64 {
        self.steps.iter().map(|s| s.criterion).sum()
    }

    /// Error sequence used for stopping: MS1PE on the ERR path, MSSE otherwise.
    pub fn errors(&self) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| match self.method {
                SelectionMethod::Err => s.ms1pe,
                _ => s.msse.unwrap_or(f64::INFINITY),
            })
            .collect()
    }

    /// CSV with header `step,regressor,criterion,error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,regressor,criterion,error\n");
        for (i, (s, e)) in self.steps.iter().zip(self.errors()).enumerate() {
            let _ = writeln!(out, "{},{},{:?},{:?}", i + 1, s.regressor, s.criterion, e);
        }
        out
    }
}

fn prepare(ts: &TimeSeries, candidates: &[Regressor], n_max: usize) -> Result<(Vec<Regressor>, usize)> {
    if candidates.is_empty() {
        return Err(NarxError::invalid("empty candidate set"));
    }
    if n_max == 0 {
        return Err(NarxError::invalid("n_max must be at least 1"));
    }
    if candidates.iter().any(Regressor::has_noise) {
        return Err(NarxError::invalid(
            "noise regressors cannot be selected from measured data",
        ));
    }
    let mut cands = candidates.to_vec();
    cands.sort();
    cands.dedup();
    let start = cands.iter().map(Regressor::max_lag).max().unwrap_or(0);
    if ts.len() <= start + 1 {
        return Err(NarxError::InsufficientData {
            needed: start + 1,
            available: ts.len(),
        });
    }
    Ok((cands, start))
}

fn candidate_matrix(ts: &TimeSeries, cands: &[Regressor], start: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let s = ModelStructure::from_regressors(cands.to_vec())?;
    let prob = build_regression_from(ts, &s, None, start)?;
    Ok((prob.psi, prob.target))
}

/// Forward selection by error reduction ratio with modified Gram–Schmidt
/// orthogonalization of the remaining candidates against the chosen ones.
/// Candidates are ranked in canonical order, so exact ties and input order
/// do not affect the result.
pub fn frols_err(ts: &TimeSeries, candidates: &[Regressor], n_max: usize) -> Result<SelectionTrace> {
    let (cands, start) = prepare(ts, candidates, n_max)?;
    let (psi, y) = candidate_matrix(ts, &cands, start)?;
    let rows = y.len();
    let yy = y.norm_squared();
    let sigma_y2 = yy / rows as f64;
    let mut trace = SelectionTrace {
        method: SelectionMethod::Err,
        steps: Vec::new(),
        sigma_y2,
        start,
        n_rows: rows,
        stop_index: 0,
        early_stop: None,
    };
    if yy == 0.0 {
        trace.early_stop = Some("output is identically zero".into());
        return Ok(trace);
    }

    let mut w: Vec<DVector<f64>> = (0..cands.len()).map(|j| psi.column(j).into_owned()).collect();
    let norms: Vec<f64> = w.iter().map(|c| c.norm()).collect();
    let mut remaining: Vec<usize> = (0..cands.len()).collect();
    let mut chosen: Vec<DVector<f64>> = Vec::new();
    let mut resid = y.clone();

    while trace.steps.len() < n_max.min(cands.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &j) in remaining.iter().enumerate() {
            let ww = w[j].norm_squared();
            if ww.sqrt() <= RANK_TOL * norms[j] || ww == 0.0 {
                continue;
            }
            let g = w[j].dot(&y) / ww;
            let err = g * g * ww / yy;
            if best.is_none_or(|(_, b)| err > b) {
                best = Some((pos, err));
            }
        }
        let Some((pos, err)) = best else {
            trace.early_stop = Some("remaining candidates are collinear with the chosen set".into());
            break;
        };
        let j = remaining.remove(pos);
        let q = w[j].clone();
        let qq = q.norm_squared();
        let g = q.dot(&resid) / qq;
        resid.axpy(-g, &q, 1.0);
        // Orthogonalize the survivors against the new direction, twice for
        // numerical safety.
        for &k in &remaining {
            for _ in 0..2 {
                let c = q.dot(&w[k]) / qq;
                w[k].axpy(-c, &q, 1.0);
            }
        }
        chosen.push(q);
        trace.steps.push(SelectionStep {
            regressor: cands[j].clone(),
            criterion: err,
            ms1pe: resid.norm_squared() / rows as f64,
            msse: None,
        });
    }
    trace.stop_index = trace.steps.len();
    Ok(trace)
}

/// Correntropy `(1/N) Σ exp(−(x−w)²/(2σ²))` with an unnormalized Gaussian kernel.
pub fn correntropy(x: &[f64], w: &[f64], sigma: f64) -> f64 {
    let n = x.len().min(w.len());
    if n == 0 {
        return 0.0;
    }
    let s2 = 2.0 * sigma * sigma;
    x.iter()
        .zip(w)
        .map(|(a, b)| (-(a - b) * (a - b) / s2).exp())
        .sum::<f64>()
        / n as f64
}

/// Silverman's rule-of-thumb width `1.06 σ N^(−1/5)`.
pub fn silverman_width(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

struct SimFit {
    msse: f64,
    ms1pe: f64,
    y_sim: Vec<f64>,
}

/// LS refit on the common rows followed by a free run from the measured
/// initial outputs. `None` when the fit is singular or the run diverges.
fn refit_and_simulate(ts: &TimeSeries, regs: &[Regressor], start: usize, limit: f64) -> Option<SimFit> {
    let s = ModelStructure::from_regressors(regs.to_vec()).ok()?;
    let prob = build_regression_from(ts, &s, None, start).ok()?;
    let theta = least_squares(&prob).ok()?;
    let ms1pe = prob.sse(&theta) / prob.rows() as f64;
    let model = PolynomialModel::new(s, theta).ok()?;
    let opts = SimOptions {
        u3_pin: None,
        divergence_limit: limit,
    };
    let run = simulate_free_run_with(&model, ts.u(), &ts.y()[..start], &opts).ok()?;
    if run.diverged() {
        return None;
    }
    let y_sim = run.y[start..].to_vec();
    let msse = y_sim
        .iter()
        .zip(&ts.y()[start..])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y_sim.len() as f64;
    Some(SimFit { msse, ms1pe, y_sim })
}

fn simulation_select(
    ts: &TimeSeries,
    candidates: &[Regressor],
    n_max: usize,
    method: SelectionMethod,
    kernel_sigma: Option<f64>,
) -> Result<SelectionTrace> {
    let (cands, start) = prepare(ts, candidates, n_max)?;
    let y = &ts.y()[start..];
    let rows = y.len();
    let sigma_y2 = y.iter().map(|v| v * v).sum::<f64>() / rows as f64;
    let y_max = ts.y().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let limit = 1e3 * y_max.max(f64::MIN_POSITIVE);
    let sigma = match kernel_sigma {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(NarxError::invalid(format!("kernel width {s} must be positive"))),
        None => silverman_width(y),
    };
    let mut trace = SelectionTrace {
        method,
        steps: Vec::new(),
        sigma_y2,
        start,
        n_rows: rows,
        stop_index: 0,
        early_stop: None,
    };
    if sigma_y2 == 0.0 || (method == SelectionMethod::Ssmr && sigma == 0.0) {
        trace.early_stop = Some("output is constant".into());
        return Ok(trace);
    }

    // The empty model simulates to zero.
    let mut cur_msse = sigma_y2;
    let mut cur_sim = vec![0.0; rows];
    let mut chosen: Vec<Regressor> = Vec::new();
    let mut remaining = cands;
    while chosen.len() < n_max && !remaining.is_empty() {
        let scored: Vec<(f64, Option<SimFit>)> = remaining
            .par_iter()
            .map(|c| {
                let mut regs = chosen.clone();
                regs.push(c.clone());
                match refit_and_simulate(ts, &regs, start, limit) {
                    None => (f64::NEG_INFINITY, None),
                    Some(fit) => {
                        let score = match method {
                            SelectionMethod::Srr => (cur_msse - fit.msse) / sigma_y2,
                            _ => (correntropy(y, &fit.y_sim, sigma) - correntropy(y, &cur_sim, sigma)) / sigma_y2,
                        };
                        (score, Some(fit))
                    }
                }
            })
            .collect();
        let mut best: Option<usize> = None;
        for (i, (score, _)) in scored.iter().enumerate() {
            if score.is_finite() && best.is_none_or(|b| *score > scored[b].0) {
                best = Some(i);
            }
        }
        let Some(b) = best else {
            trace.early_stop = Some("every remaining candidate diverges in free run".into());
            break;
        };
        let score = scored[b].0;
        if score < 0.0 {
            trace.early_stop = Some("no remaining candidate improves the criterion".into());
            break;
        }
        let mut scored = scored;
        let fit = scored.swap_remove(b).1.expect("finite score has a fit");
        let reg = remaining.remove(b);
        chosen.push(reg.clone());
        cur_msse = fit.msse;
        cur_sim = fit.y_sim;
        trace.steps.push(SelectionStep {
            regressor: reg,
            criterion: score,
            ms1pe: fit.ms1pe,
            msse: Some(fit.msse),
        });
    }
    trace.stop_index = trace.steps.len();
    Ok(trace)
}

/// Forward selection by simulation error reduction ratio: every surviving
/// candidate is refit by LS together with the chosen set and scored by the
/// drop in free-run MSSE. Divergent candidates score −∞.
pub fn srr_select(ts: &TimeSeries, candidates: &[Regressor], n_max: usize) -> Result<SelectionTrace> {
    simulation_select(ts, candidates, n_max, SelectionMethod::Srr, None)
}

/// Forward selection by the increase of free-run correntropy with the
/// measured output. The kernel width defaults to Silverman's rule on `y`.
pub fn ssmr_select(
    ts: &TimeSeries,
    candidates: &[Regressor],
    n_max: usize,
    kernel_sigma: Option<f64>,
) -> Result<SelectionTrace> {
    simulation_select(ts, candidates, n_max, SelectionMethod::Ssmr, kernel_sigma)
}

/// Floor applied to the error before the logarithm.
pub fn aic_floor(sigma_y2: f64) -> f64 {
    (1e-20 * sigma_y2).max(1e-30)
}

/// Model size minimizing `n·ln(error_i) + 2i`; earliest index on ties.
pub fn aic_stop(trace: &SelectionTrace, n_data: usize) -> Result<usize> {
    let errors = trace.errors();
    if !errors.iter().any(|e| e.is_finite()) {
        return Err(NarxError::invalid("trace has no finite error"));
    }
    let floor = aic_floor(trace.sigma_y2);
    let n = n_data as f64;
    let mut best = (f64::INFINITY, 1);
    for (i, e) in errors.iter().enumerate() {
        if !e.is_finite() {
            continue;
        }
        let aic = n * e.max(floor).ln() + 2.0 * (i + 1) as f64;
        if aic < best.0 {
            best = (aic, i + 1);
        }
    }
    Ok(best.1)
}

/// Smallest model whose accumulated criterion reaches `1 − rho`; the full
/// trace when it never does.
pub fn err_threshold_stop(trace: &SelectionTrace, rho: f64) -> usize {
    let mut acc = 0.0;
    for (i, s) in trace.steps.iter().enumerate() {
        acc += s.criterion;
        if acc >= 1.0 - rho {
            return i + 1;
        }
    }
    trace.steps.len()
}
