// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Simulated flux-qubit device with hidden ground truth.
//!
//! Every qubit has an X loop and a Z loop, each with a dedicated bias line,
//! so a device with `n` qubits has `2n` loops and `2n` lines. Loop `2q` is
//! the X loop of qubit `q` and loop `2q + 1` its Z loop; line indices follow
//! the same layout. Loop fluxes respond linearly to line currents,
//!
//! ```text
//! Φ = M · I + Φ_offset
//! ```
//!
//! with `M` in Φ0/mA. Off-diagonal entries of `M` are the crosstalk that the
//! calibration routines in [`crate::xtalk`] have to discover.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::readout::ResonatorParams;

/// Magnetic flux quantum in Wb.
pub const FLUX_QUANTUM_WB: f64 = 2.067833848e-15;

/// Upper bound on qubits for a simulated device.
pub const MAX_QUBITS: usize = 8;

const MAX_GENERATION_ATTEMPTS: usize = 16;

/// Per-qubit circuit parameters.
///
/// The junction critical currents and shunt capacitance are carried as
/// metadata only; the qubit is simulated as an effective two-level system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitParams {
    pub persistent_current_na: f64,
    pub x_junction_critical_current_na: f64,
    pub z_junction_critical_current_na: f64,
    pub shunt_capacitance_ff: f64,
    pub base_t1_us: f64,
    pub base_tphi_ns: f64,
    pub ref_ip_na: f64,
    pub f01_ghz: f64,
}

impl Default for QubitParams {
    fn default() -> Self {
        Self {
            persistent_current_na: 100.0,
            x_junction_critical_current_na: 90.0,
            z_junction_critical_current_na: 186.0,
            shunt_capacitance_ff: 45.0,
            base_t1_us: 3.5,
            base_tphi_ns: 130.0,
            ref_ip_na: 100.0,
            f01_ghz: 4.2,
        }
    }
}

impl QubitParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("persistent_current_na", self.persistent_current_na),
            ("x_junction_critical_current_na", self.x_junction_critical_current_na),
            ("z_junction_critical_current_na", self.z_junction_critical_current_na),
            ("ref_ip_na", self.ref_ip_na),
            ("base_t1_us", self.base_t1_us),
            ("base_tphi_ns", self.base_tphi_ns),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Coherence times at persistent current `ip_na`: T1 scales as 1/Ip² and
    /// the dephasing time as 1/Ip, both anchored at `ref_ip_na`.
    pub fn coherence_at(&self, ip_na: f64) -> Result<Coherence> {
        if !(ip_na > 0.0) {
            return Err(Error::invalid(format!("operating Ip must be > 0, got {ip_na}")));
        }
        let ratio = self.ref_ip_na / ip_na;
        Ok(Coherence {
            t1_us: self.base_t1_us * ratio * ratio,
            tphi_ns: self.base_tphi_ns * ratio,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    pub t1_us: f64,
    pub tphi_ns: f64,
}

/// Shape of the periodic resonator response seen in 2D flux scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResponse {
    /// Gaussian width of the per-cell feature, Φ0.
    pub feature_width_phi0: f64,
    /// How far the resonance is pulled away from `f_down` between features,
    /// in resonator linewidths.
    pub swing_linewidths: f64,
    /// Standard deviation of additive measurement noise on transmission.
    pub noise_sigma: f64,
}

impl Default for ScanResponse {
    fn default() -> Self {
        Self {
            feature_width_phi0: 0.18,
            swing_linewidths: 4.0,
            noise_sigma: 0.0,
        }
    }
}

/// Declarative device description, usually loaded from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub qubits: Vec<QubitParams>,
    /// Designed (diagonal) mutual of each line onto its own loop, Φ0/mA.
    /// Empty means 1.0 for every line.
    #[serde(default)]
    pub designed_mutuals: Vec<f64>,
    pub crosstalk_fraction: f64,
    /// Scale applied to the crosstalk bound between lines of adjacent qubits.
    /// Lines of non-adjacent qubits do not couple.
    #[serde(default = "default_inter_qubit_scale")]
    pub inter_qubit_scale: f64,
    #[serde(default = "default_true")]
    pub offsets_enabled: bool,
    pub seed: u64,
    #[serde(default)]
    pub noise: ScanResponse,
    /// Per-qubit readout resonators; empty means defaults for every qubit.
    #[serde(default)]
    pub resonators: Vec<ResonatorParams>,
}

fn default_inter_qubit_scale() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

impl DeviceConfig {
    pub fn single_qubit(crosstalk_fraction: f64, seed: u64) -> Self {
        Self::with_qubits(1, crosstalk_fraction, seed)
    }

    pub fn with_qubits(n: usize, crosstalk_fraction: f64, seed: u64) -> Self {
        Self {
            qubits: vec![QubitParams::default(); n],
            designed_mutuals: Vec::new(),
            crosstalk_fraction,
            inter_qubit_scale: default_inter_qubit_scale(),
            offsets_enabled: true,
            seed,
            noise: ScanResponse::default(),
            resonators: Vec::new(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn n_lines(&self) -> usize {
        2 * self.qubits.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.qubits.len();
        if !(1..=MAX_QUBITS).contains(&n) {
            return Err(Error::invalid(format!("qubit count must be in 1..={MAX_QUBITS}, got {n}")));
        }
        if !(0.0..=0.5).contains(&self.crosstalk_fraction) {
            return Err(Error::invalid(format!(
                "crosstalk_fraction must be in [0, 0.5], got {}",
                self.crosstalk_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.inter_qubit_scale) {
            return Err(Error::invalid("inter_qubit_scale must be in [0, 1]"));
        }
        if !self.designed_mutuals.is_empty() {
            if self.designed_mutuals.len() != self.n_lines() {
                return Err(Error::DimensionMismatch {
                    expected: self.n_lines(),
                    got: self.designed_mutuals.len(),
                });
            }
            if self.designed_mutuals.iter().any(|&m| !(m.abs() > 0.0) || !m.is_finite()) {
                return Err(Error::invalid("designed mutuals must be finite and nonzero"));
            }
        }
        if !self.resonators.is_empty() && self.resonators.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.resonators.len() });
        }
        if !(self.noise.feature_width_phi0 > 0.0 && self.noise.feature_width_phi0 < 0.5) {
            return Err(Error::invalid("feature_width_phi0 must be in (0, 0.5)"));
        }
        if !(self.noise.swing_linewidths > 0.0) || !(self.noise.noise_sigma >= 0.0) {
            return Err(Error::invalid("scan response swing must be > 0 and noise sigma >= 0"));
        }
        for q in &self.qubits {
            q.validate()?;
        }
        Ok(())
    }
}

/// Hidden ground truth of a simulated device. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTruth {
    /// Φ0/mA, `n_loops × n_lines`.
    pub true_control_matrix: DMatrix<f64>,
    pub designed_mutuals: Vec<f64>,
    /// Φ0, one per loop.
    pub flux_offsets: Vec<f64>,
    pub qubits: Vec<QubitParams>,
    pub resonators: Vec<ResonatorParams>,
    /// Fractional flux (Φ0 mod 1) at which each loop's scan feature sits.
    pub pattern_fractional_offset: Vec<f64>,
    pub response: ScanResponse,
    pub crosstalk_fraction: f64,
    pub rng_seed: u64,
}

/// Label of loop or line `index`: `x{q}` or `z{q}`.
pub fn channel_label(index: usize) -> String {
    let q = index / 2;
    if index % 2 == 0 {
        format!("x{q}")
    } else {
        format!("z{q}")
    }
}

/// Inverse of [`channel_label`].
pub fn parse_channel(label: &str) -> Option<usize> {
    let (kind, rest) = label.split_at(label.char_indices().nth(1)?.0);
    let q: usize = rest.parse().ok()?;
    match kind {
        "x" => Some(2 * q),
        "z" => Some(2 * q + 1),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxVector {
    /// Φ0
    pub values: Vec<f64>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentVector {
    /// mA
    pub values: Vec<f64>,
    pub labels: Vec<String>,
}

impl CurrentVector {
    pub fn new(values: Vec<f64>) -> Self {
        let labels = (0..values.len()).map(channel_label).collect();
        Self { values, labels }
    }

    pub fn zeros(n_lines: usize) -> Self {
        Self::new(vec![0.0; n_lines])
    }
}

/// Flux setpoint of one qubit's two loops, in mΦ0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealControlPoint {
    pub phi_x_mphi0: f64,
    pub phi_z_mphi0: f64,
}

/// Generates a device from its configuration. Deterministic in `config.seed`.
pub fn build_device(config: &DeviceConfig) -> Result<DeviceTruth> {
    config.validate()?;
    let n_qubits = config.qubits.len();
    let n = config.n_lines();
    let designed: Vec<f64> = if config.designed_mutuals.is_empty() {
        vec![1.0; n]
    } else {
        config.designed_mutuals.clone()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut matrix = None;
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let m = draw_control_matrix(&designed, config, &mut rng);
        if is_well_conditioned(&m) {
            matrix = Some(m);
            break;
        }
    }
    let true_control_matrix =
        matrix.ok_or(Error::SingularDevice { attempts: MAX_GENERATION_ATTEMPTS })?;

    let flux_offsets = (0..n)
        .map(|_| if config.offsets_enabled { rng.random_range(-0.5..0.5) } else { 0.0 })
        .collect();
    let pattern_fractional_offset = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let resonators = if config.resonators.is_empty() {
        vec![ResonatorParams::default(); n_qubits]
    } else {
        config.resonators.clone()
    };

    Ok(DeviceTruth {
        true_control_matrix,
        designed_mutuals: designed,
        flux_offsets,
        qubits: config.qubits.clone(),
        resonators,
        pattern_fractional_offset,
        response: config.noise.clone(),
        crosstalk_fraction: config.crosstalk_fraction,
        rng_seed: config.seed,
    })
}

fn draw_control_matrix(designed: &[f64], config: &DeviceConfig, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = designed.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return designed[i];
        }
        let (qi, qj) = (i / 2, j / 2);
        let scale = match qi.abs_diff(qj) {
            0 => 1.0,
            1 => config.inter_qubit_scale,
            _ => 0.0,
        };
        let bound = config.crosstalk_fraction * scale * designed[i].abs();
        if bound == 0.0 {
            0.0
        } else {
            rng.random_range(-bound..=bound)
        }
    })
}

fn is_well_conditioned(m: &DMatrix<f64>) -> bool {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    max.is_finite() && min > 1e-6 * max
}

impl DeviceTruth {
    pub fn n_qubits(&self) -> usize {
        self.qubits.len()
    }

    pub fn n_loops(&self) -> usize {
        self.true_control_matrix.nrows()
    }

    pub fn n_lines(&self) -> usize {
        self.true_control_matrix.ncols()
    }

    /// Loop fluxes produced by the given line currents, offsets included.
    pub fn true_flux(&self, currents: &CurrentVector) -> Result<FluxVector> {
        if currents.values.len() != self.n_lines() {
            return Err(Error::DimensionMismatch { expected: self.n_lines(), got: currents.values.len() });
        }
        let i = DVector::from_column_slice(&currents.values);
        let phi = &self.true_control_matrix * i + DVector::from_column_slice(&self.flux_offsets);
        Ok(FluxVector {
            values: phi.iter().copied().collect(),
            labels: (0..self.n_loops()).map(channel_label).collect(),
        })
    }

    /// Current on each line that would produce nominal flux `nominal` (Φ0)
    /// through that line's own loop in the absence of crosstalk.
    pub fn nominal_to_currents(&self, nominal: &[f64]) -> Result<CurrentVector> {
        if nominal.len() != self.n_lines() {
            return Err(Error::DimensionMismatch { expected: self.n_lines(), got: nominal.len() });
        }
        Ok(CurrentVector::new(
            nominal.iter().zip(&self.designed_mutuals).map(|(u, m)| u / m).collect(),
        ))
    }

    /// Control matrix expressed in nominal units: `M · diag(designed)⁻¹`.
    /// Unit diagonal when the designed mutuals match the true diagonal.
    pub fn nominal_response(&self) -> DMatrix<f64> {
        let mut g = self.true_control_matrix.clone();
        for (j, m) in self.designed_mutuals.iter().enumerate() {
            g.column_mut(j).scale_mut(1.0 / m);
        }
        g
    }

    pub fn effective_coherence(&self, qubit: usize, ip_na: f64) -> Result<Coherence> {
        let q = self.qubits.get(qubit).ok_or_else(|| Error::invalid(format!("no qubit {qubit}")))?;
        q.coherence_at(ip_na)
    }

    /// Largest |off-diagonal| / |diagonal| ratio over all rows.
    pub fn max_crosstalk_ratio(&self) -> f64 {
        let m = &self.true_control_matrix;
        let mut worst: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if i != j {
                    worst = worst.max(m[(i, j)].abs() / m[(i, i)].abs());
                }
            }
        }
        worst
    }
}
