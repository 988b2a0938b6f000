// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Coherence measurements: π-pulse T1 decay and detuned Ramsey fringes.
//!
//! Times are in ns throughout; Ramsey detunings are in MHz.
//!
//! Fitting is Levenberg–Marquardt from a small multi-start grid:
//!
//! * T1: `A·exp(−t/T1) + C`, seeded from a log-linear regression plus
//!   `T1 ∈ {span/4, span/2, span, 2·span}`.
//! * Ramsey: `A·exp(−t/T2*)·cos(2πft + φ) + C`, with `f` seeded from the
//!   periodogram peak, `T2* ∈ {span/6, span/3, span/1.5}` and
//!   `φ ∈ {0, π/2, π, 3π/2}`.
//!
//! The start with the lowest residual wins.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textio::TextMatrix;

pub const MIN_TRACE_POINTS: usize = 8;
const MIN_T1_SPAN: f64 = 1.5;
const MIN_RAMSEY_PERIODS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    T1Decay,
    Ramsey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTrace {
    pub delays_ns: Vec<f64>,
    pub populations: Vec<f64>,
    pub shot_noise_sigma: f64,
    pub kind: TraceKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceFitResult {
    pub kind: TraceKind,
    /// T1 or T2*, ns.
    pub time_constant_ns: f64,
    /// Ramsey only.
    pub ramsey_detuning_mhz: Option<f64>,
    pub amplitude: f64,
    pub offset: f64,
    /// Ramsey only, radians.
    pub phase: Option<f64>,
    pub fit_rms: f64,
    /// Parameter variances in the order (A, τ, C) or (A, τ, f, φ, C);
    /// frequency variance in MHz².
    pub covariance_diag: Vec<f64>,
    pub iterations: usize,
}

/// 25 log-spaced delays from T1/50 to 4·T1.
pub fn default_t1_delays(t1_ns: f64) -> Vec<f64> {
    log_space(t1_ns / 50.0, 4.0 * t1_ns, 25)
}

/// 60 linear delays from 0 out to 3·T2*, extended when needed so the trace
/// spans at least three fringe periods.
pub fn default_ramsey_delays(t2_star_ns: f64, detuning_mhz: f64) -> Vec<f64> {
    let periods_ns = MIN_RAMSEY_PERIODS * 1e3 / detuning_mhz;
    let end = (3.0 * t2_star_ns).max(periods_ns);
    (0..60).map(|i| end * i as f64 / 59.0).collect()
}

fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    let (la, lb) = (a.ln(), b.ln());
    (0..n).map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn add_noise(values: &mut [f64], sigma: f64, seed: u64) -> Result<()> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::invalid("noise sigma must be finite and >= 0"));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    for v in values {
        *v += normal.sample(&mut rng);
    }
    Ok(())
}

fn check_delays(delays: &[f64]) -> Result<()> {
    if delays.is_empty() {
        return Err(Error::invalid("delay list is empty"));
    }
    if delays.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("delays must be strictly increasing"));
    }
    Ok(())
}

pub fn t1_model(t: f64, amplitude: f64, t1: f64, offset: f64) -> f64 {
    amplitude * (-t / t1).exp() + offset
}

pub fn ramsey_model(t: f64, amplitude: f64, t2: f64, freq_ghz: f64, phase: f64, offset: f64) -> f64 {
    amplitude * (-t / t2).exp() * (2.0 * PI * freq_ghz * t + phase).cos() + offset
}

/// Excited-state population after a π pulse and delay: `exp(−t/T1)` plus noise.
pub fn simulate_t1_trace(t1_ns: f64, delays_ns: &[f64], noise_sigma: f64, seed: u64) -> Result<DecayTrace> {
    if !(t1_ns > 0.0) {
        return Err(Error::invalid("T1 must be > 0"));
    }
    check_delays(delays_ns)?;
    let mut populations: Vec<f64> = delays_ns.iter().map(|&t| t1_model(t, 1.0, t1_ns, 0.0)).collect();
    add_noise(&mut populations, noise_sigma, seed)?;
    Ok(DecayTrace {
        delays_ns: delays_ns.to_vec(),
        populations,
        shot_noise_sigma: noise_sigma,
        kind: TraceKind::T1Decay,
    })
}

/// Ramsey fringe `½ + ½·exp(−t/T2*)·cos(2π·Δ·t)` plus noise.
pub fn simulate_ramsey_trace(
    t2_star_ns: f64,
    detuning_mhz: f64,
    delays_ns: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<DecayTrace> {
    if !(t2_star_ns > 0.0) {
        return Err(Error::invalid("T2* must be > 0"));
    }
    if !(1.0..=20.0).contains(&detuning_mhz) {
        return Err(Error::invalid(format!("Ramsey detuning must be in 1..=20 MHz, got {detuning_mhz}")));
    }
    check_delays(delays_ns)?;
    let f = detuning_mhz * 1e-3;
    let mut populations: Vec<f64> =
        delays_ns.iter().map(|&t| ramsey_model(t, 0.5, t2_star_ns, f, 0.0, 0.5)).collect();
    add_noise(&mut populations, noise_sigma, seed)?;
    Ok(DecayTrace {
        delays_ns: delays_ns.to_vec(),
        populations,
        shot_noise_sigma: noise_sigma,
        kind: TraceKind::Ramsey,
    })
}

/// Warns when a configured T2* exceeds 2·T1, which no physical qubit allows.
pub fn physicality_warning(t1_ns: f64, t2_star_ns: f64) -> Option<String> {
    (t2_star_ns > 2.0 * t1_ns)
        .then(|| format!("T2* = {t2_star_ns} ns exceeds 2·T1 = {} ns", 2.0 * t1_ns))
}

struct LmOutcome {
    params: Vec<f64>,
    ssr: f64,
    jtj: DMatrix<f64>,
    iterations: usize,
}

/// Levenberg–Marquardt with Marquardt diagonal scaling.
fn levenberg_marquardt<M, J>(t: &[f64], y: &[f64], p0: &[f64], model: M, jac: J) -> Option<LmOutcome>
where
    M: Fn(f64, &[f64]) -> f64,
    J: Fn(f64, &[f64], &mut [f64]),
{
    let n = t.len();
    let k = p0.len();
    let ssr_of = |p: &[f64]| -> f64 { t.iter().zip(y).map(|(&ti, &yi)| (model(ti, p) - yi).powi(2)).sum() };
    let mut p = p0.to_vec();
    let mut ssr = ssr_of(&p);
    if !ssr.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    let mut row = vec![0.0; k];
    let mut jtj = DMatrix::zeros(k, k);
    for iter in 0..500 {
        let mut jtr = DVector::zeros(k);
        jtj.fill(0.0);
        for i in 0..n {
            jac(t[i], &p, &mut row);
            let r = model(t[i], &p) - y[i];
            for a in 0..k {
                jtr[a] += row[a] * r;
                for b in 0..k {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut lhs = jtj.clone();
            for a in 0..k {
                lhs[(a, a)] += lambda * jtj[(a, a)].max(1e-300);
            }
            let Some(step) = lhs.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            let trial_ssr = ssr_of(&trial);
            if trial_ssr.is_finite() && trial_ssr <= ssr {
                let rel_step = step
                    .iter()
                    .zip(&p)
                    .map(|(d, a)| d.abs() / (a.abs() + 1e-12))
                    .fold(0.0, f64::max);
                let converged = rel_step < 1e-13 || (ssr - trial_ssr) <= 1e-15 * ssr.max(1e-300);
                p = trial;
                ssr = trial_ssr;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if converged {
                    return Some(LmOutcome { params: p, ssr, jtj, iterations: iter + 1 });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            return Some(LmOutcome { params: p, ssr, jtj, iterations: iter + 1 });
        }
    }
    Some(LmOutcome { params: p, ssr, jtj, iterations: 500 })
}

fn covariance_diag(outcome: &LmOutcome, n: usize) -> Vec<f64> {
    let k = outcome.params.len();
    let dof = (n.saturating_sub(k)).max(1) as f64;
    let s2 = outcome.ssr / dof;
    match outcome.jtj.clone().try_inverse() {
        Some(inv) => (0..k).map(|i| inv[(i, i)] * s2).collect(),
        None => vec![f64::NAN; k],
    }
}

/// Slope of `ln(y)` against `t` over the points where `y` is clearly positive.
fn log_linear_t1(t: &[f64], y: &[f64]) -> Option<f64> {
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .filter(|(_, &v)| v > 0.05 * ymax && v > 0.0)
        .map(|(&a, &v)| (a, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -1.0 / slope)
}

/// Frequency (GHz) maximizing the periodogram of the mean-removed trace.
fn periodogram_peak(t: &[f64], y: &[f64]) -> (f64, f64) {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let span = t[t.len() - 1] - t[0];
    let min_dt = t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let f_lo = 0.5 / span;
    let f_hi = (0.5 / min_dt).min(0.05);
    let n = 4000;
    let mut best = (f_lo, 0.0, f64::NEG_INFINITY);
    for i in 0..=n {
        let f = f_lo + (f_hi - f_lo) * i as f64 / n as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (&ti, &yi) in t.iter().zip(y) {
            let arg = 2.0 * PI * f * ti;
            re += (yi - mean) * arg.cos();
            im -= (yi - mean) * arg.sin();
        }
        let power = re * re + im * im;
        if power > best.2 {
            best = (f, im.atan2(re), power);
        }
    }
    (best.0, best.1)
}

/// Fits a T1 or Ramsey model to a trace.
pub fn fit_decay(trace: &DecayTrace) -> Result<CoherenceFitResult> {
    let t = &trace.delays_ns;
    let y = &trace.populations;
    if t.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: t.len(), got: y.len() });
    }
    if t.len() < MIN_TRACE_POINTS {
        return Err(Error::invalid(format!("need at least {MIN_TRACE_POINTS} points, got {}", t.len())));
    }
    check_delays(t)?;
    match trace.kind {
        TraceKind::T1Decay => fit_t1(t, y),
        TraceKind::Ramsey => fit_ramsey(t, y),
    }
}

fn fit_t1(t: &[f64], y: &[f64]) -> Result<CoherenceFitResult> {
    let span = t[t.len() - 1] - t[0].min(0.0);
    let a0 = y[0] - y[y.len() - 1];
    let c0 = y[y.len() - 1].min(y[0]);
    let mut starts = vec![span / 4.0, span / 2.0, span, 2.0 * span];
    if let Some(guess) = log_linear_t1(t, y) {
        starts.insert(0, guess);
    }
    let model = |ti: f64, p: &[f64]| t1_model(ti, p[0], p[1], p[2]);
    let jac = |ti: f64, p: &[f64], out: &mut [f64]| {
        let e = (-ti / p[1]).exp();
        out[0] = e;
        out[1] = p[0] * e * ti / (p[1] * p[1]);
        out[2] = 1.0;
    };
    let best = starts
        .iter()
        .filter_map(|&tau| levenberg_marquardt(t, y, &[a0.max(1e-3), tau, c0], model, jac))
        .filter(|o| o.params[1] > 0.0 && o.params[1].is_finite())
        .min_by(|a, b| a.ssr.total_cmp(&b.ssr))
        .ok_or_else(|| Error::FitDiverged(format!("no T1 start converged ({} starts)", starts.len())))?;
    let tau = best.params[1];
    if span < 0.9 * MIN_T1_SPAN * tau {
        return Err(Error::FitDiverged(format!(
            "trace spans {span:.3} ns but needs at least {MIN_T1_SPAN}·T1 = {:.3} ns",
            MIN_T1_SPAN * tau
        )));
    }
    Ok(CoherenceFitResult {
        kind: TraceKind::T1Decay,
        time_constant_ns: tau,
        ramsey_detuning_mhz: None,
        amplitude: best.params[0],
        offset: best.params[2],
        phase: None,
        fit_rms: (best.ssr / t.len() as f64).sqrt(),
        covariance_diag: covariance_diag(&best, t.len()),
        iterations: best.iterations,
    })
}

fn fit_ramsey(t: &[f64], y: &[f64]) -> Result<CoherenceFitResult> {
    let span = t[t.len() - 1] - t[0];
    let (f0, _) = periodogram_peak(t, y);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let a0 = 0.5 * (hi - lo);
    let nyquist = 0.5 / t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);

    let model = |ti: f64, p: &[f64]| ramsey_model(ti, p[0], p[1], p[2], p[3], p[4]);
    let jac = |ti: f64, p: &[f64], out: &mut [f64]| {
        let e = (-ti / p[1]).exp();
        let arg = 2.0 * PI * p[2] * ti + p[3];
        let (s, c) = arg.sin_cos();
        out[0] = e * c;
        out[1] = p[0] * e * c * ti / (p[1] * p[1]);
        out[2] = -p[0] * e * s * 2.0 * PI * ti;
        out[3] = -p[0] * e * s;
        out[4] = 1.0;
    };

    let mut best: Option<LmOutcome> = None;
    for tau in [span / 6.0, span / 3.0, span / 1.5] {
        for phase in [0.0, 0.5 * PI, PI, 1.5 * PI] {
            let Some(o) = levenberg_marquardt(t, y, &[a0, tau, f0, phase, mean], model, jac) else {
                continue;
            };
            if !(o.params[1] > 0.0 && o.params[1].is_finite() && o.params[2].abs() < nyquist) {
                continue;
            }
            if best.as_ref().is_none_or(|b| o.ssr < b.ssr) {
                best = Some(o);
            }
        }
    }
    let mut best = best.ok_or_else(|| Error::FitDiverged("no Ramsey start converged".into()))?;
    // Canonical sign: positive amplitude and frequency, phase in (−π, π].
    if best.params[2] < 0.0 {
        best.params[2] = -best.params[2];
        best.params[3] = -best.params[3];
    }
    if best.params[0] < 0.0 {
        best.params[0] = -best.params[0];
        best.params[3] += PI;
    }
    best.params[3] = wrap_phase(best.params[3]);

    let freq_mhz = best.params[2] * 1e3;
    // Fitted quantities carry noise, so the coverage check allows 10% slack.
    if span * best.params[2] < 0.9 * MIN_RAMSEY_PERIODS {
        return Err(Error::FitDiverged(format!(
            "trace covers {:.2} fringe periods; at least {MIN_RAMSEY_PERIODS} needed",
            span * best.params[2]
        )));
    }
    let mut cov = covariance_diag(&best, t.len());
    cov[2] *= 1e6;
    Ok(CoherenceFitResult {
        kind: TraceKind::Ramsey,
        time_constant_ns: best.params[1],
        ramsey_detuning_mhz: Some(freq_mhz),
        amplitude: best.params[0],
        offset: best.params[4],
        phase: Some(best.params[3]),
        fit_rms: (best.ssr / t.len() as f64).sqrt(),
        covariance_diag: cov,
        iterations: best.iterations,
    })
}

fn wrap_phase(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

impl CoherenceFitResult {
    pub fn predict(&self, t_ns: f64) -> f64 {
        match self.kind {
            TraceKind::T1Decay => t1_model(t_ns, self.amplitude, self.time_constant_ns, self.offset),
            TraceKind::Ramsey => ramsey_model(
                t_ns,
                self.amplitude,
                self.time_constant_ns,
                self.ramsey_detuning_mhz.unwrap_or(0.0) * 1e-3,
                self.phase.unwrap_or(0.0),
                self.offset,
            ),
        }
    }
}

/// Plot-ready table: delay, data, model and residual per point.
pub fn residual_table(trace: &DecayTrace, fit: &CoherenceFitResult) -> TextMatrix {
    let mut m = TextMatrix::default();
    m.push_header("kind", "residuals");
    m.push_header("columns", "delay_ns data model residual");
    for (&t, &y) in trace.delays_ns.iter().zip(&trace.populations) {
        let model = fit.predict(t);
        m.rows.push(vec![t, y, model, y - model]);
    }
    m
}

impl DecayTrace {
    pub fn to_matrix(&self) -> TextMatrix {
        let mut m = TextMatrix::default();
        m.push_header("kind", "trace");
        m.push_header(
            "trace_kind",
            match self.kind {
                TraceKind::T1Decay => "t1_decay",
                TraceKind::Ramsey => "ramsey",
            },
        );
        m.push_header("shot_noise_sigma", self.shot_noise_sigma);
        m.push_header("columns", "delay_ns population");
        m.rows = self.delays_ns.iter().zip(&self.populations).map(|(&t, &p)| vec![t, p]).collect();
        m
    }

    pub fn from_matrix(m: &TextMatrix) -> Result<Self> {
        let kind = match m.require("trace_kind")? {
            "t1_decay" => TraceKind::T1Decay,
            "ramsey" => TraceKind::Ramsey,
            other => return Err(Error::Parse(format!("unknown trace kind `{other}`"))),
        };
        let mut delays_ns = Vec::with_capacity(m.rows.len());
        let mut populations = Vec::with_capacity(m.rows.len());
        for row in &m.rows {
            if row.len() != 2 {
                return Err(Error::Parse("trace rows need two columns".into()));
            }
            delays_ns.push(row[0]);
            populations.push(row[1]);
        }
        Ok(Self { delays_ns, populations, shot_noise_sigma: m.require_f64("shot_noise_sigma")?, kind })
    }
}
