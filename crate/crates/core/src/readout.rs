// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Dispersive single-shot readout through an rf-SQUID-terminated resonator.
//!
//! The qubit's persistent-current direction shifts the resonator by
//! `state_shift`. A probe tone at the |↓⟩ resonance sees low transmission for
//! |↓⟩ and nearly full transmission for |↑⟩. Integrated voltages carry
//! additive Gaussian noise whose σ falls as 1/√t with integration time.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::device::FLUX_QUANTUM_WB;
use crate::error::{Error, Result};

/// Shots drawn per RNG stream; ensembles are split into chunks of this size.
const SHOT_CHUNK: usize = 8192;

pub const MIN_SHOTS_PER_STATE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QubitState {
    Down,
    Up,
}

impl std::fmt::Display for QubitState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QubitState::Down => "down",
            QubitState::Up => "up",
        })
    }
}

impl std::str::FromStr for QubitState {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(QubitState::Down),
            "up" => Ok(QubitState::Up),
            other => Err(Error::Parse(format!("unknown qubit state `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonatorParams {
    /// Resonance with the qubit in |↓⟩, GHz.
    pub f_down_ghz: f64,
    /// Added to the resonance for |↑⟩, MHz.
    pub state_shift_mhz: f64,
    pub loaded_q: f64,
    /// Notch depth of |S| on resonance.
    pub depth: f64,
    pub qubit_flux_signal_mphi0: f64,
    pub mutual_to_squid_ph: f64,
    pub coupler_engaged: bool,
    /// T1 reduction factor while the tunable coupler is engaged.
    pub coupler_penalty: f64,
    /// Voltage noise σ for a 1 μs integration.
    pub sigma_unit: f64,
}

/// Probe frequency used in the default readout configuration, GHz.
pub const DEFAULT_PROBE_GHZ: f64 = 6.003;
/// Default integration time, μs.
pub const DEFAULT_INTEGRATION_US: f64 = 10.0;
/// Separation (in σ) that `sigma_unit` is calibrated to at the defaults.
pub const DEFAULT_TARGET_SEPARATION: f64 = 11.0;

impl Default for ResonatorParams {
    fn default() -> Self {
        let f_down_ghz = DEFAULT_PROBE_GHZ;
        let state_shift_mhz = 15.0;
        // 15 MHz corresponds to 14 linewidths.
        let linewidth_mhz = state_shift_mhz / 14.0;
        let mut p = Self {
            f_down_ghz,
            state_shift_mhz,
            loaded_q: f_down_ghz * 1e3 / linewidth_mhz,
            depth: 0.25,
            qubit_flux_signal_mphi0: qubit_flux_into_squid(100.0, 50.0).unwrap_or(0.0),
            mutual_to_squid_ph: 50.0,
            coupler_engaged: false,
            coupler_penalty: 10.0,
            sigma_unit: 0.0,
        };
        p.sigma_unit =
            calibrate_sigma_unit(&p, DEFAULT_PROBE_GHZ, DEFAULT_TARGET_SEPARATION, DEFAULT_INTEGRATION_US);
        p
    }
}

impl ResonatorParams {
    /// Linewidth κ = f_down / Q, in MHz.
    pub fn linewidth_mhz(&self) -> f64 {
        self.f_down_ghz * 1e3 / self.loaded_q
    }

    pub fn shift_in_linewidths(&self) -> f64 {
        self.state_shift_mhz / self.linewidth_mhz()
    }

    pub fn resonance_ghz(&self, state: QubitState) -> f64 {
        match state {
            QubitState::Down => self.f_down_ghz,
            QubitState::Up => self.f_down_ghz + self.state_shift_mhz * 1e-3,
        }
    }

    /// Noise σ on a single integrated voltage.
    pub fn sigma_at(&self, integration_time_us: f64) -> f64 {
        self.sigma_unit / integration_time_us.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loaded_q > 0.0) || !(self.f_down_ghz > 0.0) {
            return Err(Error::invalid("resonator needs f_down > 0 and loaded_Q > 0"));
        }
        if !(0.0..=1.0).contains(&self.depth) {
            return Err(Error::invalid("notch depth must be in [0, 1]"));
        }
        if !(self.sigma_unit >= 0.0) || !(self.coupler_penalty >= 1.0) {
            return Err(Error::invalid("sigma_unit must be >= 0 and coupler_penalty >= 1"));
        }
        Ok(())
    }
}

/// Flux that a persistent current `ip_na` couples into the SQUID through
/// mutual inductance `mutual_ph`, in mΦ0.
pub fn qubit_flux_into_squid(ip_na: f64, mutual_ph: f64) -> Result<f64> {
    if !(ip_na > 0.0) || !(mutual_ph > 0.0) {
        return Err(Error::invalid("persistent current and mutual inductance must be > 0"));
    }
    Ok(flux_wb(ip_na, mutual_ph) / FLUX_QUANTUM_WB * 1e3)
}

/// Flux in Wb for a current in nA through a mutual in pH.
pub fn flux_wb(ip_na: f64, mutual_ph: f64) -> f64 {
    ip_na * 1e-9 * mutual_ph * 1e-12
}

/// Notch-type transmission magnitude |S| at `probe_ghz`.
pub fn resonator_transmission(params: &ResonatorParams, state: QubitState, probe_ghz: f64) -> f64 {
    notch(params, params.resonance_ghz(state), probe_ghz)
}

pub(crate) fn notch(params: &ResonatorParams, resonance_ghz: f64, probe_ghz: f64) -> f64 {
    let kappa_ghz = params.linewidth_mhz() * 1e-3;
    let x = 2.0 * (probe_ghz - resonance_ghz) / kappa_ghz;
    1.0 - params.depth / (1.0 + x * x).sqrt()
}

/// `sigma_unit` that makes the two states `target` σ apart after integrating
/// for `integration_us`.
pub fn calibrate_sigma_unit(params: &ResonatorParams, probe_ghz: f64, target: f64, integration_us: f64) -> f64 {
    let contrast = (resonator_transmission(params, QubitState::Up, probe_ghz)
        - resonator_transmission(params, QubitState::Down, probe_ghz))
    .abs();
    contrast / target * integration_us.sqrt()
}

/// T1 seen by the qubit given the tunable-coupler state.
pub fn readout_backaction(params: &ResonatorParams, anneal_t1_us: f64) -> f64 {
    if params.coupler_engaged {
        anneal_t1_us / params.coupler_penalty
    } else {
        anneal_t1_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotEnsemble {
    pub voltages: Vec<f64>,
    pub integration_time_us: f64,
    pub prepared_state: QubitState,
    pub probe_ghz: f64,
    pub seed: u64,
}

fn validate_integration(t_us: f64) -> Result<()> {
    if !(t_us > 0.0) || !t_us.is_finite() {
        return Err(Error::invalid(format!("integration time must be > 0, got {t_us}")));
    }
    Ok(())
}

fn draw_chunk(mean: f64, sigma: f64, seed: u64, chunk: usize, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    if sigma == 0.0 {
        return vec![mean; len];
    }
    let normal = Normal::new(mean, sigma).expect("sigma is finite and positive");
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// One integrated readout voltage. Identical to the first shot of
/// [`simulate_shots`] with the same seed.
pub fn single_shot(
    params: &ResonatorParams,
    state: QubitState,
    probe_ghz: f64,
    integration_time_us: f64,
    seed: u64,
) -> Result<f64> {
    validate_integration(integration_time_us)?;
    let mean = resonator_transmission(params, state, probe_ghz);
    Ok(draw_chunk(mean, params.sigma_at(integration_time_us), seed, 0, 1)[0])
}

/// `n_shots` independent single-shot voltages. Chunks are drawn in parallel
/// from per-chunk RNG streams and concatenated in stream order.
pub fn simulate_shots(
    params: &ResonatorParams,
    state: QubitState,
    probe_ghz: f64,
    integration_time_us: f64,
    n_shots: usize,
    seed: u64,
) -> Result<ShotEnsemble> {
    validate_integration(integration_time_us)?;
    if n_shots == 0 {
        return Err(Error::invalid("shot count must be > 0"));
    }
    let mean = resonator_transmission(params, state, probe_ghz);
    let sigma = params.sigma_at(integration_time_us);
    let n_chunks = n_shots.div_ceil(SHOT_CHUNK);
    let chunks: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = SHOT_CHUNK.min(n_shots - c * SHOT_CHUNK);
            draw_chunk(mean, sigma, seed, c, len)
        })
        .collect();
    Ok(ShotEnsemble {
        voltages: chunks.concat(),
        integration_time_us,
        prepared_state: state,
        probe_ghz,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationResult {
    pub threshold: f64,
    pub mean_down: f64,
    pub mean_up: f64,
    pub sigma_down: f64,
    pub sigma_up: f64,
    pub separation_sigma: f64,
    pub misclassified_down: usize,
    pub misclassified_up: usize,
    pub fidelity_estimate: f64,
    pub analytic_error: f64,
    /// Set when the states are less than 1σ apart.
    pub low_confidence: bool,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.iter().all(|&x| x == v[0]) {
        return (v[0], 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Point between the two means where the Gaussian likelihoods are equal.
fn equal_likelihood_threshold(mu_d: f64, s_d: f64, mu_u: f64, s_u: f64) -> f64 {
    let mid = 0.5 * (mu_d + mu_u);
    if s_d == 0.0 && s_u == 0.0 {
        return mid;
    }
    let weighted = mu_d + (mu_u - mu_d) * s_d / (s_d + s_u);
    if s_d == 0.0 || s_u == 0.0 || ((s_d - s_u) / (s_d + s_u)).abs() < 1e-12 {
        return if s_d == s_u { mid } else { weighted };
    }
    // a x² + b x + c = 0 from equating the log densities.
    let (vd, vu) = (s_d * s_d, s_u * s_u);
    let a = 1.0 / vd - 1.0 / vu;
    let b = 2.0 * (mu_u / vu - mu_d / vd);
    let c = mu_d * mu_d / vd - mu_u * mu_u / vu + 2.0 * (s_d / s_u).ln();
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return weighted;
    }
    let sq = disc.sqrt();
    let (lo, hi) = if mu_d < mu_u { (mu_d, mu_u) } else { (mu_u, mu_d) };
    [(-b + sq) / (2.0 * a), (-b - sq) / (2.0 * a)]
        .into_iter()
        .find(|x| (lo..=hi).contains(x))
        .unwrap_or(weighted)
}

/// Gaussian misclassification probability for states `separation` σ apart
/// with a midpoint threshold.
pub fn analytic_error(separation: f64) -> f64 {
    0.5 * erfc(separation / (2.0 * std::f64::consts::SQRT_2))
}

/// Threshold discrimination of two prepared-state ensembles.
///
/// A voltage below the threshold is classified |↓⟩ when the |↓⟩ mean lies
/// below the |↑⟩ mean, and |↑⟩ otherwise.
pub fn discriminate(down: &ShotEnsemble, up: &ShotEnsemble) -> Result<DiscriminationResult> {
    for e in [down, up] {
        if e.voltages.len() < MIN_SHOTS_PER_STATE {
            return Err(Error::invalid(format!(
                "need at least {MIN_SHOTS_PER_STATE} shots per state, got {}",
                e.voltages.len()
            )));
        }
    }
    let (mean_down, sigma_down) = mean_std(&down.voltages);
    let (mean_up, sigma_up) = mean_std(&up.voltages);
    let threshold = equal_likelihood_threshold(mean_down, sigma_down, mean_up, sigma_up);
    let down_is_low = mean_down <= mean_up;

    let misclassified_down = down
        .voltages
        .iter()
        .filter(|&&v| if down_is_low { v >= threshold } else { v < threshold })
        .count();
    let misclassified_up = up
        .voltages
        .iter()
        .filter(|&&v| if down_is_low { v < threshold } else { v >= threshold })
        .count();
    let total = (down.voltages.len() + up.voltages.len()) as f64;
    let fidelity_estimate = 1.0 - (misclassified_down + misclassified_up) as f64 / total;

    let pooled = 0.5 * (sigma_up + sigma_down);
    let gap = (mean_up - mean_down).abs();
    let separation_sigma = if pooled > 0.0 {
        gap / pooled
    } else if gap > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };

    Ok(DiscriminationResult {
        threshold,
        mean_down,
        mean_up,
        sigma_down,
        sigma_up,
        separation_sigma,
        misclassified_down,
        misclassified_up,
        fidelity_estimate,
        analytic_error: analytic_error(separation_sigma),
        low_confidence: separation_sigma < 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub edges: Vec<f64>,
    pub counts_down: Vec<u64>,
    pub counts_up: Vec<u64>,
    pub discrimination: DiscriminationResult,
}

/// Bins both ensembles on a shared set of `n_bins` equal-width bins.
pub fn histogram(down: &ShotEnsemble, up: &ShotEnsemble, n_bins: usize) -> Result<HistogramSummary> {
    if n_bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let discrimination = discriminate(down, up)?;
    let all = down.voltages.iter().chain(&up.voltages);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let edges = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let bin = |v: f64| (((v - lo) / width) as usize).min(n_bins - 1);
    let mut counts_down = vec![0u64; n_bins];
    let mut counts_up = vec![0u64; n_bins];
    for &v in &down.voltages {
        counts_down[bin(v)] += 1;
    }
    for &v in &up.voltages {
        counts_up[bin(v)] += 1;
    }
    Ok(HistogramSummary { edges, counts_down, counts_up, discrimination })
}

impl ShotEnsemble {
    /// Single-column text: `#` header lines followed by one voltage per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# fluxqa-shots v1\n");
        let _ = writeln!(out, "# state: {}", self.prepared_state);
        let _ = writeln!(out, "# integration_time_us: {}", self.integration_time_us);
        let _ = writeln!(out, "# probe_ghz: {}", self.probe_ghz);
        let _ = writeln!(out, "# seed: {}", self.seed);
        let _ = writeln!(out, "# n_shots: {}", self.voltages.len());
        for v in &self.voltages {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut state = None;
        let mut t = None;
        let mut probe = None;
        let mut seed = None;
        let mut voltages = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                if let Some((k, v)) = h.split_once(':') {
                    let v = v.trim();
                    match k.trim() {
                        "state" => state = Some(v.parse::<QubitState>()?),
                        "integration_time_us" => t = Some(parse_f64(v)?),
                        "probe_ghz" => probe = Some(parse_f64(v)?),
                        "seed" => seed = Some(v.parse::<u64>().map_err(|e| Error::Parse(e.to_string()))?),
                        _ => {}
                    }
                }
                continue;
            }
            voltages.push(parse_f64(line)?);
        }
        let missing = |k: &str| Error::Parse(format!("shot file missing `{k}` header"));
        Ok(Self {
            voltages,
            integration_time_us: t.ok_or_else(|| missing("integration_time_us"))?,
            prepared_state: state.ok_or_else(|| missing("state"))?,
            probe_ghz: probe.ok_or_else(|| missing("probe_ghz"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        })
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")))
}
