//! Identification data: loading, splitting, decimation and synthetic benchmarks.
//!
//! The sampling-period criterion works on an oversampled record: compute the
//! linear and the squared-signal autocovariance, take the earliest first
//! minimum of the two, and pick a decimation factor that brings that lag into
//! the 10..=20 band (5..=25 when relaxed).

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{NarxError, Result};

/// A sampled single-input single-output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    name: String,
    u: Vec<f64>,
    y: Vec<f64>,
    sample_period: Option<f64>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(NarxError::invalid(format!(
                "input has {} samples but output has {}",
                u.len(),
                y.len()
            )));
        }
        if u.is_empty() {
            return Err(NarxError::invalid("time series must hold at least one sample"));
        }
        if let Some(k) = u.iter().chain(y.iter()).position(|v| !v.is_finite()) {
            let k = k % u.len();
            return Err(NarxError::invalid(format!("non-finite sample at index {k}")));
        }
        Ok(TimeSeries {
            name: name.into(),
            u,
            y,
            sample_period: None,
        })
    }

    pub fn with_sample_period(mut self, ts: f64) -> Self {
        self.sample_period = Some(ts);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn sample_period(&self) -> Option<f64> {
        self.sample_period
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Samples `range` of both channels as a new series.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<TimeSeries> {
        if range.start >= range.end || range.end > self.len() {
            return Err(NarxError::invalid(format!(
                "slice {}..{} outside series of length {}",
                range.start,
                range.end,
                self.len()
            )));
        }
        Ok(TimeSeries {
            name: self.name.clone(),
            u: self.u[range.clone()].to_vec(),
            y: self.y[range].to_vec(),
            sample_period: self.sample_period,
        })
    }
}

/// Loads a CSV file with columns `u,y` or `k,u,y`; a header line is optional.
pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NarxError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(&name, &text)
}

/// Parses CSV text. Row numbers in errors are 1-based file line numbers.
pub fn parse_csv(name: &str, text: &str) -> Result<TimeSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut width: Option<usize> = None;
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| NarxError::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if row == 1 && is_header(&record) {
            width = Some(record.len());
            continue;
        }
        match width {
            None => {
                if record.len() != 2 && record.len() != 3 {
                    return Err(NarxError::Parse {
                        row,
                        message: format!("expected 2 or 3 columns, found {}", record.len()),
                    });
                }
                width = Some(record.len());
            }
            Some(w) if w != record.len() => {
                return Err(NarxError::Parse {
                    row,
                    message: format!("ragged row: expected {w} columns, found {}", record.len()),
                });
            }
            Some(_) => {}
        }
        let mut values = [0.0; 3];
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| NarxError::Parse {
                row,
                message: format!("non-numeric cell {field:?} in column {}", j + 1),
            })?;
            if !v.is_finite() {
                return Err(NarxError::Parse {
                    row,
                    message: format!("non-finite cell {field:?}"),
                });
            }
            values[j] = v;
        }
        let off = record.len() - 2;
        u.push(values[off]);
        y.push(values[off + 1]);
    }
    TimeSeries::new(name, u, y)
}

fn is_header(record: &csv::StringRecord) -> bool {
    let cols: Vec<String> = record.iter().map(|s| s.to_ascii_lowercase()).collect();
    cols == ["u", "y"] || cols == ["k", "u", "y"]
}

/// Renders a series as `k,u,y` CSV using shortest round-trip float formatting.
pub fn to_csv_string(ts: &TimeSeries) -> String {
    let mut out = String::with_capacity(ts.len() * 32);
    out.push_str("k,u,y\n");
    for (k, (u, y)) in ts.u.iter().zip(&ts.y).enumerate() {
        let _ = writeln!(out, "{k},{u:?},{y:?}");
    }
    out
}

pub fn save_csv(ts: &TimeSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv_string(ts)).map_err(|source| NarxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Sizes of the identification and validation windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_ident: usize,
    pub n_valid: usize,
}

/// First `n_ident` samples for identification, the rest for validation.
pub fn split(ts: &TimeSeries, spec: SplitSpec) -> Result<(TimeSeries, TimeSeries)> {
    if spec.n_ident + spec.n_valid != ts.len() {
        return Err(NarxError::invalid(format!(
            "split {}+{} does not cover {} samples",
            spec.n_ident,
            spec.n_valid,
            ts.len()
        )));
    }
    if spec.n_ident == 0 || spec.n_valid == 0 {
        return Err(NarxError::invalid("both split windows must be nonempty"));
    }
    let ident = ts.slice(0..spec.n_ident)?;
    let valid = ts.slice(spec.n_ident..ts.len())?;
    Ok((ident, valid))
}

/// Linear and nonlinear autocovariance with their first-minimum lags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub r_lin: Vec<f64>,
    pub r_nl: Vec<f64>,
    pub tau_lin: Option<usize>,
    pub tau_nl: Option<usize>,
    pub tau_m_star: Option<usize>,
    /// Set when the signal (or its square) has zero variance.
    pub degenerate: bool,
}

impl CovarianceReport {
    /// Combines two first-minimum lags the way the decimation criterion does.
    pub fn least_lag(tau_lin: Option<usize>, tau_nl: Option<usize>) -> Option<usize> {
        match (tau_lin, tau_nl) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Default maximum lag for [`covariance_analysis`].
pub fn default_tau_max(n: usize) -> usize {
    (n / 4).clamp(2, 500)
}

pub fn covariance_analysis(y_star: &[f64], tau_max: usize) -> Result<CovarianceReport> {
    if tau_max < 2 || y_star.len() <= tau_max {
        return Err(NarxError::invalid(format!(
            "need 2 <= tau_max < N, got tau_max={tau_max}, N={}",
            y_star.len()
        )));
    }
    let squared: Vec<f64> = y_star.iter().map(|v| v * v).collect();
    let r_lin = autocovariance(y_star, tau_max);
    let r_nl = autocovariance(&squared, tau_max);
    let n = y_star.len();
    let degenerate = !(r_lin[0] > 0.0) || !(r_nl[0] > 0.0);
    let tau_lin = first_minimum(&r_lin, n);
    let tau_nl = first_minimum(&r_nl, n);
    Ok(CovarianceReport {
        tau_m_star: CovarianceReport::least_lag(tau_lin, tau_nl),
        r_lin,
        r_nl,
        tau_lin,
        tau_nl,
        degenerate,
    })
}

/// Biased (1/N) autocovariance of the mean-removed signal for lags `0..=tau_max`,
/// computed through a zero-padded FFT.
pub fn autocovariance(x: &[f64], tau_max: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let len = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let scale = 1.0 / (len as f64 * n as f64);
    buf.iter()
        .take(tau_max.min(n - 1) + 1)
        .map(|c| c.re * scale)
        .collect()
}

/// Earliest lag that is either a strict local minimum (plateaus resolved to
/// their first lag, a descending endpoint counts) or the entry point of a tail
/// that stays inside the sampling-noise floor `5 r(0)/sqrt(N)` up to `tau_max`.
fn first_minimum(r: &[f64], n: usize) -> Option<usize> {
    if r.len() < 2 || !(r[0] > 0.0) {
        return None;
    }
    let strict = strict_first_minimum(r);
    let floor = 5.0 * r[0] / (n as f64).sqrt();
    let mut entry = None;
    for tau in (1..r.len()).rev() {
        if r[tau].abs() <= floor {
            entry = Some(tau);
        } else {
            break;
        }
    }
    match (strict, entry) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

fn strict_first_minimum(r: &[f64]) -> Option<usize> {
    let last = r.len() - 1;
    let mut tau = 1;
    while tau <= last {
        if r[tau] < r[tau - 1] {
            let mut end = tau;
            while end < last && r[end + 1] == r[tau] {
                end += 1;
            }
            if end == last || r[end + 1] > r[tau] {
                return Some(tau);
            }
            tau = end + 1;
        } else {
            tau += 1;
        }
    }
    None
}

/// Outcome of the decimation-factor search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecimationChoice {
    pub factor: usize,
    pub tau_m: usize,
    /// No factor reached 10..=20; `factor` is the closest one.
    pub relaxed: bool,
    /// `tau_m` lies inside the relaxed band 5..=25.
    pub within_relaxed_band: bool,
}

pub const TAU_BAND: (usize, usize) = (10, 20);
pub const TAU_BAND_RELAXED: (usize, usize) = (5, 25);

/// Picks the decimation factor whose decimated lag `round(tau*/factor)` falls in
/// 10..=20, preferring the lag closest to the band centre (larger factor on ties).
pub fn choose_decimation(tau_m_star: usize) -> DecimationChoice {
    let tau_m_star = tau_m_star.max(1);
    let tau_of = |factor: usize| (tau_m_star as f64 / factor as f64).round() as usize;
    let centre = (TAU_BAND.0 + TAU_BAND.1) as f64 / 2.0;
    let band_distance = |t: usize| {
        if t < TAU_BAND.0 {
            TAU_BAND.0 - t
        } else { t.saturating_sub(TAU_BAND.1) }
    };

    let mut best: Option<(usize, f64)> = None;
    for factor in 1..=tau_m_star {
        let t = tau_of(factor);
        if band_distance(t) == 0 {
            let d = (t as f64 - centre).abs();
            if best.is_none_or(|(_, bd)| d <= bd) {
                best = Some((factor, d));
            }
        }
    }
    if let Some((factor, _)) = best {
        let tau_m = tau_of(factor);
        return DecimationChoice {
            factor,
            tau_m,
            relaxed: false,
            within_relaxed_band: true,
        };
    }

    let mut factor = 1;
    let mut dist = band_distance(tau_of(1));
    for f in 2..=tau_m_star {
        let d = band_distance(tau_of(f));
        if d < dist {
            factor = f;
            dist = d;
        }
    }
    let tau_m = tau_of(factor);
    DecimationChoice {
        factor,
        tau_m,
        relaxed: true,
        within_relaxed_band: (TAU_BAND_RELAXED.0..=TAU_BAND_RELAXED.1).contains(&tau_m),
    }
}

/// Keeps samples `0, factor, 2·factor, …` of both channels.
pub fn decimate(ts: &TimeSeries, factor: usize) -> Result<TimeSeries> {
    if factor == 0 {
        return Err(NarxError::invalid("decimation factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(ts.clone());
    }
    if factor >= ts.len() {
        return Err(NarxError::invalid(format!(
            "decimation factor {factor} not below series length {}",
            ts.len()
        )));
    }
    let u = ts.u.iter().step_by(factor).copied().collect();
    let y = ts.y.iter().step_by(factor).copied().collect();
    Ok(TimeSeries {
        name: ts.name.clone(),
        u,
        y,
        sample_period: ts.sample_period.map(|t| t * factor as f64),
    })
}

/// Number of one-sided periodogram bins of the mean-removed input whose power
/// exceeds `power_threshold` times the largest bin.
pub fn excitation_summary(u: &[f64], power_threshold: f64) -> Result<usize> {
    let n = u.len();
    if n < 4 {
        return Err(NarxError::InsufficientData {
            needed: 3,
            available: n,
        });
    }
    let mean = u.iter().sum::<f64>() / n as f64;
    let scale = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut buf: Vec<Complex<f64>> = u.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let power: Vec<f64> = buf[..=n / 2].iter().map(|c| c.norm_sqr() / n as f64).collect();
    let max = power.iter().fold(0.0_f64, |m, &p| m.max(p));
    // Rounding residue of the mean removal on a constant signal.
    if max <= (1e-12 * scale).powi(2) * n as f64 {
        return Ok(0);
    }
    Ok(power.iter().filter(|&&p| p > power_threshold * max).count())
}

/// Hammerstein benchmark: dead-zone static map followed by first-order dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HammersteinConfig {
    pub input_mean: f64,
    pub input_std: f64,
    pub noise_std: f64,
    pub pole: f64,
    pub gain: f64,
    pub dead_zone: f64,
}

impl Default for HammersteinConfig {
    fn default() -> Self {
        HammersteinConfig {
            input_mean: 1.0,
            input_std: 0.6,
            noise_std: 0.1,
            pole: 0.9,
            gain: 0.7,
            dead_zone: 1.0,
        }
    }
}

impl HammersteinConfig {
    fn static_map(&self, u: f64) -> f64 {
        if u < self.dead_zone {
            0.0
        } else {
            u - self.dead_zone
        }
    }

    /// Simulates the benchmark for a given input; noise drawn from `seed`.
    pub fn simulate(&self, u: &[f64], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("finite std");
        let mut y = Vec::with_capacity(u.len());
        let mut prev = 0.0;
        for k in 0..u.len() {
            let e = if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let v = if k == 0 {
                e
            } else {
                self.pole * prev + self.gain * self.static_map(u[k - 1]) + e
            };
            y.push(v);
            prev = v;
        }
        y
    }

    /// Uniform input with the configured mean and standard deviation.
    pub fn random_input(&self, seed: u64, n: usize) -> Vec<f64> {
        let half_width = self.input_std * 3f64.sqrt();
        let lo = self.input_mean - half_width;
        let hi = self.input_mean + half_width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    pub fn generate(&self, seed: u64, n: usize) -> Result<TimeSeries> {
        if n == 0 {
            return Err(NarxError::invalid("benchmark length must be at least 1"));
        }
        let u = self.random_input(seed, n);
        let y = self.simulate(&u, seed);
        TimeSeries::new(format!("hammerstein-{seed}"), u, y)
    }
}

/// `y(k) = 0.9 y(k-1) + 0.7 z(k-1) + e(k)` with dead-zone `z` and U(mean 1, std 0.6) input.
pub fn generate_hammerstein_benchmark(seed: u64, n: usize) -> Result<TimeSeries> {
    HammersteinConfig::default().generate(seed, n)
}
