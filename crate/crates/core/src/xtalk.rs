// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Crosstalk calibration from 2D resonator scans.
//!
//! A scan drives two control lines at *nominal* flux `u` (Φ0, as if each line
//! coupled only to its own loop) and records the readout resonator's
//! transmission. The resonator dips wherever both loops of the probed qubit
//! sit on their feature flux, so in nominal coordinates the dips form the
//! lattice `u = A·m + b`, `m ∈ Z²`, where `A = G⁻¹` for the 2×2 block `G` of
//! the control matrix.
//!
//! An [`AffineCorrection`] with `T = A` and `offset = b` defines corrected
//! coordinates `v` by `u = T·v + offset`. In `v` each loop follows a single
//! coordinate and the dips sit on integer points.
//!
//! Scan images are stored as `values[iy][ix]`: rows follow `axis_y`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::device::{channel_label, parse_channel, DeviceTruth, FluxVector};
use crate::error::{Error, Result};
use crate::readout::{notch, ResonatorParams};
use crate::textio::TextMatrix;

/// 2D point `[x, y]` in scan coordinates.
pub type Point = [f64; 2];
/// Row-major 2×2 matrix.
pub type Mat2 = [[f64; 2]; 2];

pub const DEFAULT_HALF_WIDTH: f64 = 1.25;
pub const DEFAULT_POINTS: usize = 101;
pub const MIN_AXIS_POINTS: usize = 8;
/// Centers further than this from their rounded lattice index are rejected.
pub const INDEX_RESIDUAL_LIMIT: f64 = 0.25;

pub const SAWTOOTH_DWELL_US: RangeInclusive<f64> = 1.0..=5.0;
pub const SAWTOOTH_RAMP_HZ: RangeInclusive<f64> = 100.0..=1000.0;

fn to_na(m: &Mat2) -> Matrix2<f64> {
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

fn from_na(m: &Matrix2<f64>) -> Mat2 {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

// ---------------------------------------------------------------------------
// Acquisition time model

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionMode {
    Raster,
    Sawtooth,
}

impl fmt::Display for AcquisitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AcquisitionMode::Raster => "raster",
            AcquisitionMode::Sawtooth => "sawtooth",
        })
    }
}

impl FromStr for AcquisitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(AcquisitionMode::Raster),
            "sawtooth" => Ok(AcquisitionMode::Sawtooth),
            other => Err(Error::invalid(format!("unknown acquisition mode `{other}`"))),
        }
    }
}

/// Timing parameters of a scan.
///
/// Raster: every point is stepped to, allowed to settle, then averaged,
/// `total = n_x·n_y·(settle + n_averages·dwell)`.
///
/// Sawtooth: the fast axis is swept by a ramp at `ramp_hz` and sampled every
/// `dwell_us`; `n_averages` ramps are averaged on the digitizer for each of
/// the `n_y` slow-axis lines, and each line pays a fixed re-arm overhead,
/// `total = n_y·n_averages/ramp_hz + n_y·line_overhead`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub mode: AcquisitionMode,
    pub dwell_us: f64,
    /// Raster only.
    pub settle_ms: f64,
    /// Sawtooth only.
    pub ramp_hz: f64,
    pub n_averages: u32,
    /// Sawtooth only.
    pub line_overhead_ms: f64,
}

impl AcquisitionParams {
    /// Stepped acquisition whose default 101×101 grid takes about 2.85 h.
    pub fn raster() -> Self {
        Self {
            mode: AcquisitionMode::Raster,
            dwell_us: 5.0,
            settle_ms: 1000.0,
            ramp_hz: 0.0,
            n_averages: 1000,
            line_overhead_ms: 0.0,
        }
    }

    /// Ramped acquisition whose default 101×101 grid takes about 9.2 s.
    pub fn sawtooth() -> Self {
        Self {
            mode: AcquisitionMode::Sawtooth,
            dwell_us: 2.0,
            settle_ms: 0.0,
            ramp_hz: 500.0,
            n_averages: 45,
            line_overhead_ms: 1.0,
        }
    }
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        Self::sawtooth()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionReport {
    pub mode: AcquisitionMode,
    pub per_point_dwell_us: f64,
    pub settle_time_ms: Option<f64>,
    pub ramp_frequency_hz: Option<f64>,
    pub line_overhead_ms: Option<f64>,
    pub n_averages: u32,
    pub n_points: usize,
    pub n_lines_scanned: usize,
    pub total_time_s: f64,
}

/// Wall-clock time of acquiring an `n_x × n_y` grid.
pub fn simulate_acquisition_time(n_x: usize, n_y: usize, p: &AcquisitionParams) -> Result<AcquisitionReport> {
    if n_x == 0 || n_y == 0 {
        return Err(Error::invalid("grid must have at least one point per axis"));
    }
    if !(p.dwell_us > 0.0) || p.n_averages == 0 {
        return Err(Error::invalid("dwell and averages must be positive"));
    }
    let n_avg = f64::from(p.n_averages);
    let mut report = AcquisitionReport {
        mode: p.mode,
        per_point_dwell_us: p.dwell_us,
        settle_time_ms: None,
        ramp_frequency_hz: None,
        line_overhead_ms: None,
        n_averages: p.n_averages,
        n_points: n_x * n_y,
        n_lines_scanned: n_y,
        total_time_s: 0.0,
    };
    match p.mode {
        AcquisitionMode::Raster => {
            if !(p.settle_ms > 0.0) {
                return Err(Error::invalid("raster settle time must be positive"));
            }
            let per_point_s = p.settle_ms * 1e-3 + n_avg * p.dwell_us * 1e-6;
            report.settle_time_ms = Some(p.settle_ms);
            report.total_time_s = (n_x * n_y) as f64 * per_point_s;
        }
        AcquisitionMode::Sawtooth => {
            if !SAWTOOTH_DWELL_US.contains(&p.dwell_us) {
                return Err(Error::invalid(format!("sawtooth dwell must be in 1..=5 μs, got {}", p.dwell_us)));
            }
            if !SAWTOOTH_RAMP_HZ.contains(&p.ramp_hz) {
                return Err(Error::invalid(format!("ramp frequency must be in 100..=1000 Hz, got {}", p.ramp_hz)));
            }
            if !(p.line_overhead_ms >= 0.0) {
                return Err(Error::invalid("line overhead must be >= 0"));
            }
            if n_x as f64 * p.dwell_us * 1e-6 > 1.0 / p.ramp_hz {
                return Err(Error::invalid(format!(
                    "{n_x} samples of {} μs do not fit in one {} Hz ramp",
                    p.dwell_us, p.ramp_hz
                )));
            }
            report.ramp_frequency_hz = Some(p.ramp_hz);
            report.line_overhead_ms = Some(p.line_overhead_ms);
            report.total_time_s = n_y as f64 * n_avg / p.ramp_hz + n_y as f64 * p.line_overhead_ms * 1e-3;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Transmission model

fn wrapped_gaussian(d: f64, width: f64) -> f64 {
    let d = d - d.round();
    let g = |x: f64| (-x * x / (2.0 * width * width)).exp();
    let num: f64 = (-2..=2).map(|k| g(d - f64::from(k))).sum();
    let den: f64 = (-2..=2).map(|k| g(f64::from(k))).sum();
    num / den
}

fn transmission_at(device: &DeviceTruth, qubit: usize, phi_x: f64, phi_z: f64, probe_ghz: f64) -> f64 {
    let p = &device.pattern_fractional_offset;
    let w = device.response.feature_width_phi0;
    let bump = wrapped_gaussian(phi_x - p[2 * qubit], w) * wrapped_gaussian(phi_z - p[2 * qubit + 1], w);
    transmission_for_bump(device, qubit, bump, probe_ghz)
}

fn transmission_for_bump(device: &DeviceTruth, qubit: usize, bump: f64, probe_ghz: f64) -> f64 {
    let res = &device.resonators[qubit];
    let kappa = res.linewidth_mhz() * 1e-3;
    let f_r = res.f_down_ghz + device.response.swing_linewidths * kappa * (bump - 1.0);
    notch(res, f_r, probe_ghz)
}

/// Transmission of `qubit`'s readout resonator when the loops carry `flux`.
///
/// Periodic with period 1 Φ0 in each of the qubit's two loop fluxes. Within
/// a unit cell the resonance is pulled onto `f_down` only at the pattern
/// offset, giving one transmission minimum per cell when probing at `f_down`.
pub fn transmission_model(device: &DeviceTruth, flux: &FluxVector, probe_ghz: f64, qubit: usize) -> Result<f64> {
    if flux.values.len() != device.n_loops() {
        return Err(Error::DimensionMismatch { expected: device.n_loops(), got: flux.values.len() });
    }
    if qubit >= device.n_qubits() {
        return Err(Error::invalid(format!("no qubit {qubit}")));
    }
    Ok(transmission_at(device, qubit, flux.values[2 * qubit], flux.values[2 * qubit + 1], probe_ghz))
}

/// Depth of the scan features: transmission between features minus at a
/// feature center.
pub fn feature_contrast(device: &DeviceTruth, qubit: usize, probe_ghz: f64) -> f64 {
    let far = wrapped_gaussian(0.5, device.response.feature_width_phi0).powi(2);
    (transmission_for_bump(device, qubit, far, probe_ghz) - transmission_for_bump(device, qubit, 1.0, probe_ghz))
        .abs()
}

/// Frequency range over which the resonator responds to flux, padded by
/// five linewidths on each side.
pub fn resonator_band(res: &ResonatorParams, swing_linewidths: f64) -> (f64, f64) {
    let kappa = res.linewidth_mhz() * 1e-3;
    (res.f_down_ghz - swing_linewidths * kappa - 5.0 * kappa, res.f_down_ghz + 5.0 * kappa)
}

// ---------------------------------------------------------------------------
// Scans

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanAxis {
    /// Control line (`x0`, `z0`, ...), or the corrected coordinate along that
    /// line when the scan is corrected.
    pub label: String,
    pub start: f64,
    pub stop: f64,
    pub n_points: usize,
}

impl ScanAxis {
    pub fn new(label: impl Into<String>, start: f64, stop: f64, n_points: usize) -> Self {
        Self { label: label.into(), start, stop, n_points }
    }

    pub fn step(&self) -> f64 {
        (self.stop - self.start) / (self.n_points - 1) as f64
    }

    pub fn value(&self, i: usize) -> f64 {
        self.at_pixel(i as f64)
    }

    /// Coordinate at fractional pixel position `px`.
    pub fn at_pixel(&self, px: f64) -> f64 {
        self.start + (self.stop - self.start) * px / (self.n_points - 1) as f64
    }

    pub fn extent(&self) -> f64 {
        self.stop - self.start
    }

    fn validate(&self) -> Result<()> {
        if self.n_points < MIN_AXIS_POINTS {
            return Err(Error::invalid(format!(
                "axis `{}` needs at least {MIN_AXIS_POINTS} points, got {}",
                self.label, self.n_points
            )));
        }
        if !(self.start.is_finite() && self.stop.is_finite() && self.stop > self.start) {
            return Err(Error::invalid(format!("axis `{}` must have finite start < stop", self.label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRequest {
    pub axis_x: ScanAxis,
    pub axis_y: ScanAxis,
    /// Defaults to the probed resonator's `f_down`.
    pub probe_ghz: Option<f64>,
    pub acquisition: AcquisitionParams,
    /// Nominal flux on every line, Φ0; the two scanned entries are ignored.
    /// Empty means zero.
    #[serde(default)]
    pub background: Vec<f64>,
    /// Defaults to the device's configured scan noise.
    pub noise_sigma: Option<f64>,
    pub seed: u64,
}

impl ScanRequest {
    /// Square window of half-width `half_width` around the origin.
    pub fn square(label_x: &str, label_y: &str, half_width: f64, n_points: usize) -> Self {
        Self {
            axis_x: ScanAxis::new(label_x, -half_width, half_width, n_points),
            axis_y: ScanAxis::new(label_y, -half_width, half_width, n_points),
            probe_ghz: None,
            acquisition: AcquisitionParams::default(),
            background: Vec::new(),
            noise_sigma: None,
            seed: 0,
        }
    }

    /// Default 101×101 scan of qubit `q`'s X and Z lines over ±1.25 Φ0.
    pub fn for_qubit(q: usize) -> Self {
        Self::square(&channel_label(2 * q), &channel_label(2 * q + 1), DEFAULT_HALF_WIDTH, DEFAULT_POINTS)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = Some(sigma);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid2D {
    pub axis_x: ScanAxis,
    pub axis_y: ScanAxis,
    /// `values[iy][ix]`, transmission magnitude in [0, 1].
    pub values: Vec<Vec<f64>>,
    pub acquisition: AcquisitionReport,
    pub corrected: bool,
    pub probe_ghz: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Set when the probe is outside the resonator band and the map is flat.
    pub warning: Option<String>,
}

fn line_index(device: &DeviceTruth, label: &str) -> Result<usize> {
    parse_channel(label)
        .filter(|&j| j < device.n_lines())
        .ok_or_else(|| Error::UnknownAxis(label.to_string()))
}

/// Simulates a 2D transmission map.
///
/// With a correction, axis values are corrected coordinates and are mapped
/// to nominal flux through `u = T·v + offset` before driving the lines.
/// The resonator of the qubit owning `axis_x` is read out.
pub fn scan_transmission(
    device: &DeviceTruth,
    req: &ScanRequest,
    correction: Option<&AffineCorrection>,
) -> Result<ScanGrid2D> {
    req.axis_x.validate()?;
    req.axis_y.validate()?;
    let jx = line_index(device, &req.axis_x.label)?;
    let jy = line_index(device, &req.axis_y.label)?;
    if jx == jy {
        return Err(Error::invalid("scan axes must be two different lines"));
    }
    if let Some(c) = correction {
        c.validate()?;
        if c.axes[0] != req.axis_x.label || c.axes[1] != req.axis_y.label {
            return Err(Error::invalid(format!(
                "correction is for axes ({}, {}), scan is over ({}, {})",
                c.axes[0], c.axes[1], req.axis_x.label, req.axis_y.label
            )));
        }
    }
    let n_lines = device.n_lines();
    let mut nominal = if req.background.is_empty() { vec![0.0; n_lines] } else { req.background.clone() };
    if nominal.len() != n_lines {
        return Err(Error::DimensionMismatch { expected: n_lines, got: nominal.len() });
    }
    let qubit = jx / 2;
    let res = &device.resonators[qubit];
    let probe = req.probe_ghz.unwrap_or(res.f_down_ghz);
    let sigma = req.noise_sigma.unwrap_or(device.response.noise_sigma);
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be finite and >= 0"));
    }
    let acquisition = simulate_acquisition_time(req.axis_x.n_points, req.axis_y.n_points, &req.acquisition)?;

    let (lo, hi) = resonator_band(res, device.response.swing_linewidths);
    let warning = (!(lo..=hi).contains(&probe)).then(|| {
        format!("probe {probe} GHz is outside the resonator band [{lo:.6}, {hi:.6}] GHz; map is flat")
    });

    let g = device.nominal_response();
    let (lx, lz) = (2 * qubit, 2 * qubit + 1);
    let (nx, ny) = (req.axis_x.n_points, req.axis_y.n_points);
    let mut values = vec![vec![1.0; nx]; ny];
    if warning.is_none() {
        for (iy, row) in values.iter_mut().enumerate() {
            for (ix, v) in row.iter_mut().enumerate() {
                let mut u = [req.axis_x.value(ix), req.axis_y.value(iy)];
                if let Some(c) = correction {
                    u = c.to_nominal(u);
                }
                nominal[jx] = u[0];
                nominal[jy] = u[1];
                let flux = |r: usize| -> f64 {
                    g.row(r).iter().zip(&nominal).map(|(a, b)| a * b).sum::<f64>() + device.flux_offsets[r]
                };
                *v = transmission_at(device, qubit, flux(lx), flux(lz), probe);
            }
        }
    }
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for v in values.iter_mut().flatten() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(ScanGrid2D {
        axis_x: req.axis_x.clone(),
        axis_y: req.axis_y.clone(),
        values,
        acquisition,
        corrected: correction.is_some(),
        probe_ghz: probe,
        noise_sigma: sigma,
        seed: req.seed,
        warning,
    })
}

impl ScanGrid2D {
    /// Scan coordinates of fractional pixel `(px_x, px_y)`.
    pub fn pixel_to_coords(&self, px_x: f64, px_y: f64) -> Point {
        [self.axis_x.at_pixel(px_x), self.axis_y.at_pixel(px_y)]
    }

    pub fn to_matrix(&self) -> TextMatrix {
        let mut m = TextMatrix::default();
        m.push_header("kind", "scan");
        for (name, axis) in [("axis_x", &self.axis_x), ("axis_y", &self.axis_y)] {
            m.push_header(name, &axis.label);
            m.push_header(&format!("{name}_start"), axis.start);
            m.push_header(&format!("{name}_stop"), axis.stop);
            m.push_header(&format!("{name}_points"), axis.n_points);
        }
        m.push_header("corrected", self.corrected);
        m.push_header("probe_ghz", self.probe_ghz);
        m.push_header("noise_sigma", self.noise_sigma);
        m.push_header("seed", self.seed);
        let a = &self.acquisition;
        m.push_header("acq_mode", a.mode);
        m.push_header("acq_dwell_us", a.per_point_dwell_us);
        if let Some(v) = a.settle_time_ms {
            m.push_header("acq_settle_ms", v);
        }
        if let Some(v) = a.ramp_frequency_hz {
            m.push_header("acq_ramp_hz", v);
        }
        if let Some(v) = a.line_overhead_ms {
            m.push_header("acq_line_overhead_ms", v);
        }
        m.push_header("acq_n_averages", a.n_averages);
        m.push_header("acq_total_time_s", a.total_time_s);
        if let Some(w) = &self.warning {
            m.push_header("warning", w);
        }
        m.rows = self.values.clone();
        m
    }

    pub fn to_text(&self) -> String {
        self.to_matrix().to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let m = TextMatrix::from_text(text)?;
        if m.get("kind") != Some("scan") {
            return Err(Error::Parse("matrix is not a scan".into()));
        }
        let axis = |name: &str| -> Result<ScanAxis> {
            Ok(ScanAxis {
                label: m.require(name)?.to_string(),
                start: m.require_f64(&format!("{name}_start"))?,
                stop: m.require_f64(&format!("{name}_stop"))?,
                n_points: m.require_usize(&format!("{name}_points"))?,
            })
        };
        let (axis_x, axis_y) = (axis("axis_x")?, axis("axis_y")?);
        let opt = |k: &str| -> Result<Option<f64>> {
            m.get(k)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("header `{k}`: {e}"))))
                .transpose()
        };
        let parse_bool = |v: &str| v.parse::<bool>().map_err(|e| Error::Parse(e.to_string()));
        let mode: AcquisitionMode = m.require("acq_mode")?.parse()?;
        let n_averages = m
            .require("acq_n_averages")?
            .parse::<u32>()
            .map_err(|e| Error::Parse(format!("header `acq_n_averages`: {e}")))?;
        let acquisition = AcquisitionReport {
            mode,
            per_point_dwell_us: m.require_f64("acq_dwell_us")?,
            settle_time_ms: opt("acq_settle_ms")?,
            ramp_frequency_hz: opt("acq_ramp_hz")?,
            line_overhead_ms: opt("acq_line_overhead_ms")?,
            n_averages,
            n_points: axis_x.n_points * axis_y.n_points,
            n_lines_scanned: axis_y.n_points,
            total_time_s: m.require_f64("acq_total_time_s")?,
        };
        if m.rows.len() != axis_y.n_points || m.rows.iter().any(|r| r.len() != axis_x.n_points) {
            return Err(Error::Parse(format!(
                "scan body must be {} rows of {} values",
                axis_y.n_points, axis_x.n_points
            )));
        }
        let seed = m.require("seed")?.parse::<u64>().map_err(|e| Error::Parse(format!("header `seed`: {e}")))?;
        Ok(ScanGrid2D {
            corrected: parse_bool(m.require("corrected")?)?,
            probe_ghz: m.require_f64("probe_ghz")?,
            noise_sigma: m.require_f64("noise_sigma")?,
            seed,
            warning: m.get("warning").map(str::to_string),
            values: m.rows,
            axis_x,
            axis_y,
            acquisition,
        })
    }

    fn inverted(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.axis_y.n_points, self.axis_x.n_points, |iy, ix| -self.values[iy][ix])
    }
}

// ---------------------------------------------------------------------------
// Lattice types

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSource {
    Manual,
    Automatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeFit {
    /// Columns are the two primitive vectors, in scan coordinates.
    pub primitive_vectors: Mat2,
    pub origin: Point,
    /// RMS distance between the centers and their fitted lattice points.
    pub residual_rms: f64,
    pub n_centers_used: usize,
    pub center_source: CenterSource,
}

impl LatticeFit {
    pub fn basis(&self) -> Matrix2<f64> {
        to_na(&self.primitive_vectors)
    }

    /// Lattice point with index `m`.
    pub fn point(&self, m: [i64; 2]) -> Point {
        let a = &self.primitive_vectors;
        let (i, j) = (m[0] as f64, m[1] as f64);
        [a[0][0] * i + a[0][1] * j + self.origin[0], a[1][0] * i + a[1][1] * j + self.origin[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedCenter {
    pub position: Point,
    pub index: [i64; 2],
    /// Distance, in lattice units, from the position to its rounded index.
    pub rounding_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexAssignment {
    pub indexed: Vec<IndexedCenter>,
    pub rejected: Vec<Point>,
}

/// Maps corrected coordinates `v` to nominal coordinates `u = T·v + offset`
/// for one pair of control lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCorrection {
    pub axes: [String; 2],
    pub t: Mat2,
    pub t_inv: Mat2,
    pub offset: Point,
}

impl AffineCorrection {
    pub fn new(axes: [String; 2], t: Mat2, offset: Point) -> Result<Self> {
        let inv = to_na(&t)
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::invalid("correction matrix T is singular"))?;
        Ok(Self { axes, t, t_inv: from_na(&inv), offset })
    }

    pub fn identity(axes: [String; 2]) -> Self {
        Self { axes, t: [[1.0, 0.0], [0.0, 1.0]], t_inv: [[1.0, 0.0], [0.0, 1.0]], offset: [0.0, 0.0] }
    }

    /// The exact correction for qubit lines `axes`, computed from the hidden
    /// device truth with every other line held at `background` (empty means
    /// zero). Both axes must belong to the same qubit.
    pub fn from_truth(device: &DeviceTruth, axes: [&str; 2], background: &[f64]) -> Result<Self> {
        let jx = line_index(device, axes[0])?;
        let jy = line_index(device, axes[1])?;
        if jx / 2 != jy / 2 || jx == jy {
            return Err(Error::invalid("exact correction needs the two lines of one qubit"));
        }
        let n = device.n_lines();
        let bg = if background.is_empty() { vec![0.0; n] } else { background.to_vec() };
        if bg.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: bg.len() });
        }
        let g = device.nominal_response();
        let rows = [jx, jy];
        let g_sub = Matrix2::from_fn(|r, c| g[(rows[r], rows[c])]);
        let c = Vector2::from_fn(|r, _| {
            let row = rows[r];
            (0..n).filter(|j| *j != jx && *j != jy).map(|j| g[(row, j)] * bg[j]).sum::<f64>()
                + device.flux_offsets[row]
        });
        let p = Vector2::new(device.pattern_fractional_offset[jx], device.pattern_fractional_offset[jy]);
        let a0 = g_sub.try_inverse().ok_or_else(|| Error::invalid("control block is singular"))?;
        let (a, _) = canonical_basis(&a0);
        let b = nearest_origin(&a, &(a0 * (p - c)));
        Self::new([axes[0].to_string(), axes[1].to_string()], from_na(&a), [b[0], b[1]])
    }

    pub fn t_matrix(&self) -> Matrix2<f64> {
        to_na(&self.t)
    }

    pub fn to_nominal(&self, v: Point) -> Point {
        let t = &self.t;
        [
            t[0][0] * v[0] + t[0][1] * v[1] + self.offset[0],
            t[1][0] * v[0] + t[1][1] * v[1] + self.offset[1],
        ]
    }

    pub fn to_corrected(&self, u: Point) -> Point {
        let ti = &self.t_inv;
        let d = [u[0] - self.offset[0], u[1] - self.offset[1]];
        [ti[0][0] * d[0] + ti[0][1] * d[1], ti[1][0] * d[0] + ti[1][1] * d[1]]
    }

    /// Correction equivalent to applying `inner` in the coordinates that
    /// `self` defines: `u = T₁·(T₂·v + b₂) + b₁`.
    pub fn compose(&self, inner: &AffineCorrection) -> Result<AffineCorrection> {
        if self.axes != inner.axes {
            return Err(Error::invalid("cannot compose corrections for different axes"));
        }
        let t = self.t_matrix() * inner.t_matrix();
        let off = self.to_nominal(inner.offset);
        Self::new(self.axes.clone(), from_na(&t), off)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.t.iter().chain(&self.t_inv).flatten().chain(&self.offset);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("correction has non-finite entries"));
        }
        let prod = self.t_matrix() * to_na(&self.t_inv);
        if (prod - Matrix2::identity()).abs().max() > 1e-10 {
            return Err(Error::invalid("T·T_inv differs from identity by more than 1e-10"));
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Moves `b` to the lattice point of `a` nearest the coordinate origin.
fn nearest_origin(a: &Matrix2<f64>, b: &Vector2<f64>) -> Vector2<f64> {
    let k = lattice_shift_to_origin(a, b);
    b + a * Vector2::new(k[0] as f64, k[1] as f64)
}

fn lattice_shift_to_origin(a: &Matrix2<f64>, b: &Vector2<f64>) -> [i64; 2] {
    match a.try_inverse() {
        Some(ai) => {
            let f = ai * (-b);
            [f[0].round() as i64, f[1].round() as i64]
        }
        None => [0, 0],
    }
}

/// Rewrites lattice basis `a` as the unimodular combination whose columns
/// sit closest to the unit vectors. Returns the new basis and `U` with
/// `a_new = a·U`.
pub fn canonical_basis(a: &Matrix2<f64>) -> (Matrix2<f64>, Matrix2<i64>) {
    let mut ks = Vec::with_capacity(48);
    for i in -3i64..=3 {
        for j in -3i64..=3 {
            if (i, j) != (0, 0) {
                ks.push((i, j));
            }
        }
    }
    let vec_of = |k: (i64, i64)| a * Vector2::new(k.0 as f64, k.1 as f64);
    let mut best = (f64::INFINITY, (1, 0), (0, 1));
    for &k1 in &ks {
        let v1 = vec_of(k1);
        let c1 = (v1 - Vector2::x()).norm_squared();
        if c1 >= best.0 {
            continue;
        }
        for &k2 in &ks {
            if (k1.0 * k2.1 - k1.1 * k2.0).abs() != 1 {
                continue;
            }
            let cost = c1 + (vec_of(k2) - Vector2::y()).norm_squared();
            if cost < best.0 {
                best = (cost, k1, k2);
            }
        }
    }
    let (_, k1, k2) = best;
    let u = Matrix2::new(k1.0, k2.0, k1.1, k2.1);
    (a * u.map(|v| v as f64), u)
}

// ---------------------------------------------------------------------------
// Detection

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    /// Gaussian smoothing applied before peak finding, in pixels.
    pub smoothing_px: f64,
    /// Peak threshold as a fraction of the way from the median to the
    /// maximum of the smoothed, inverted map.
    pub threshold_fraction: f64,
    /// Lattice periods the window must cover along each axis.
    pub min_periods: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self { smoothing_px: 1.5, threshold_fraction: 0.5, min_periods: 2.0 }
    }
}

/// Separable Gaussian blur. Near the edges the kernel is truncated to the
/// image and renormalized, so no mirrored features appear.
fn smooth(img: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let blur = |n: usize, i: usize, get: &dyn Fn(usize) -> f64| -> f64 {
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (k, w) in kernel.iter().enumerate() {
            let j = i as isize + k as isize - r;
            if j >= 0 && (j as usize) < n {
                acc += w * get(j as usize);
                wsum += w;
            }
        }
        acc / wsum
    };
    let (ny, nx) = img.shape();
    let along_x = DMatrix::from_fn(ny, nx, |iy, ix| blur(nx, ix, &|j| img[(iy, j)]));
    DMatrix::from_fn(ny, nx, |iy, ix| blur(ny, iy, &|j| along_x[(j, ix)]))
}

/// Strict local maxima (ties broken in raster order) over in-image
/// neighbours. Edge pixels qualify; [`refine_peak`] decides whether their
/// peak lies inside the image.
fn local_maxima(s: &DMatrix<f64>, threshold: f64) -> Vec<(usize, usize, f64)> {
    let (ny, nx) = s.shape();
    let mut out = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            let v = s[(iy, ix)];
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (y, x) = (iy as isize + dy, ix as isize + dx);
                    if (dx == 0 && dy == 0) || y < 0 || x < 0 || y >= ny as isize || x >= nx as isize {
                        continue;
                    }
                    let n = s[(y as usize, x as usize)];
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if (earlier && !(v > n)) || (!earlier && !(v >= n)) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                out.push((iy, ix, v));
            }
        }
    }
    out
}

/// Width of the weighting window used by [`refine_peak`], in pixels.
const REFINE_WEIGHT_PX: f64 = 2.0;

/// Sub-pixel peak position from a Gaussian-weighted least-squares
/// quadratic. The weights are re-centred on each new estimate, so a
/// point-symmetric peak is located without the bias of a pixel-centred
/// window. Returns `(y, x)` in pixels, or `None` when the peak lies within
/// one pixel of the border, where the fit is unreliable.
fn refine_peak(s: &DMatrix<f64>, iy: usize, ix: usize) -> Option<(f64, f64)> {
    let rho = REFINE_WEIGHT_PX;
    let r = (2.5 * rho).ceil() as isize;
    let (ny, nx) = s.shape();
    let on_edge = iy == 0 || ix == 0 || iy == ny - 1 || ix == nx - 1;
    let fallback = (!on_edge).then_some((iy as f64, ix as f64));
    let (mut cy, mut cx) = (iy as f64, ix as f64);
    for _ in 0..6 {
        let (py, px) = (cy.round() as isize, cx.round() as isize);
        let ys = (py - r).max(0)..=(py + r).min(ny as isize - 1);
        let xs = (px - r).max(0)..=(px + r).min(nx as isize - 1);
        let rows = ys.clone().count() * xs.clone().count();
        if rows < 9 {
            return fallback;
        }
        let mut design = DMatrix::zeros(rows, 6);
        let mut target = DVector::zeros(rows);
        let mut k = 0;
        for y in ys {
            for x in xs.clone() {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let w = (-(dx * dx + dy * dy) / (2.0 * rho * rho)).exp().sqrt();
                design.row_mut(k).copy_from_slice(&[w, w * dx, w * dy, w * dx * dx, w * dx * dy, w * dy * dy]);
                target[k] = w * s[(y as usize, x as usize)];
                k += 1;
            }
        }
        let Ok(c) = design.svd(true, true).solve(&target, 1e-12) else {
            return fallback;
        };
        let h = Matrix2::new(2.0 * c[3], c[4], c[4], 2.0 * c[5]);
        if !(h[(0, 0)] < 0.0 && h.determinant() > 0.0) {
            return fallback;
        }
        let off = -(h.try_inverse()? * Vector2::new(c[1], c[2]));
        if off.abs().max() > rho {
            return fallback;
        }
        cx += off[0];
        cy += off[1];
        if off.abs().max() < 1e-9 {
            break;
        }
    }
    if (cy - iy as f64).abs().max((cx - ix as f64).abs()) > 2.0 * rho {
        return fallback;
    }
    let inside = (1.0..=(ny - 2) as f64).contains(&cy) && (1.0..=(nx - 2) as f64).contains(&cx);
    inside.then_some((cy, cx))
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Estimates the lattice basis from the two shortest significant peaks of
/// the scan's 2D power spectrum. The result is in canonical form (see
/// [`canonical_basis`]).
pub fn estimate_basis(scan: &ScanGrid2D) -> Result<Matrix2<f64>> {
    let img = scan.inverted();
    let (ny, nx) = img.shape();
    let (wx, wy) = (hann(nx), hann(ny));
    let (mut sw, mut swv) = (0.0, 0.0);
    for iy in 0..ny {
        for ix in 0..nx {
            let w = wy[iy] * wx[ix];
            sw += w;
            swv += w * img[(iy, ix)];
        }
    }
    let mean = swv / sw;
    let px = (4 * nx).next_power_of_two().max(256);
    let py = (4 * ny).next_power_of_two().max(256);
    let mut buf = vec![Complex64::new(0.0, 0.0); px * py];
    for iy in 0..ny {
        for ix in 0..nx {
            buf[iy * px + ix] = Complex64::new(wy[iy] * wx[ix] * (img[(iy, ix)] - mean), 0.0);
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft_x = planner.plan_fft_forward(px);
    let fft_y = planner.plan_fft_forward(py);
    for row in buf.chunks_exact_mut(px) {
        fft_x.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); py];
    for ix in 0..px {
        for iy in 0..py {
            col[iy] = buf[iy * px + ix];
        }
        fft_y.process(&mut col);
        for iy in 0..py {
            buf[iy * px + ix] = col[iy];
        }
    }
    let mag: Vec<f64> = buf.iter().map(|c| c.norm()).collect();
    let at = |by: isize, bx: isize| -> f64 {
        mag[(by.rem_euclid(py as isize) as usize) * px + bx.rem_euclid(px as isize) as usize]
    };
    let signed = |b: usize, n: usize| -> f64 {
        if b < n / 2 {
            b as f64
        } else {
            b as f64 - n as f64
        }
    };
    let (sx, sy) = (scan.axis_x.step(), scan.axis_y.step());
    let f_min = 1.0 / scan.axis_x.extent().max(scan.axis_y.extent());

    let mut peaks = Vec::new();
    for by in 0..py {
        for bx in 0..px {
            let (fx, fy) = (signed(bx, px) / (px as f64 * sx), signed(by, py) / (py as f64 * sy));
            if !(fy > 0.0 || (fy == 0.0 && fx > 0.0)) || fx.hypot(fy) < f_min {
                continue;
            }
            let v = mag[by * px + bx];
            let (iy, ix) = (by as isize, bx as isize);
            let mut is_max = v > 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dx, dy) == (0, 0) {
                        continue;
                    }
                    let n = at(iy + dy, ix + dx);
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if (earlier && !(v > n)) || (!earlier && !(v >= n)) {
                        is_max = false;
                    }
                }
            }
            if is_max {
                // Parabolic interpolation of the log-magnitude per axis.
                let interp = |lm: f64, l0: f64, lp: f64| -> f64 {
                    let den = lm - 2.0 * l0 + lp;
                    if den < 0.0 {
                        (0.5 * (lm - lp) / den).clamp(-0.5, 0.5)
                    } else {
                        0.0
                    }
                };
                let l0 = v.ln();
                let ox = interp(at(iy, ix - 1).ln(), l0, at(iy, ix + 1).ln());
                let oy = interp(at(iy - 1, ix).ln(), l0, at(iy + 1, ix).ln());
                let k = Vector2::new(
                    (signed(bx, px) + ox) / (px as f64 * sx),
                    (signed(by, py) + oy) / (py as f64 * sy),
                );
                peaks.push((v, k));
            }
        }
    }
    let max = peaks.iter().map(|p| p.0).fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::CalibrationInsufficient("scan has no periodic structure".into()));
    }
    let mut strong: Vec<Vector2<f64>> = peaks.iter().filter(|p| p.0 >= 0.25 * max).map(|p| p.1).collect();
    strong.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let k1 = strong[0];
    let min_sin = 25f64.to_radians().sin();
    let k2 = strong
        .iter()
        .skip(1)
        .find(|k| (k1.x * k.y - k1.y * k.x).abs() > min_sin * k1.norm() * k.norm())
        .copied()
        .ok_or_else(|| Error::AmbiguousBasis("spectrum shows only one lattice direction".into()))?;
    let kmat = Matrix2::from_columns(&[k1, k2]);
    let a = kmat
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::AmbiguousBasis("spectral peaks are collinear".into()))?;
    Ok(canonical_basis(&a).0)
}

/// Lattice planes crossed along each scan axis.
fn periods_covered(scan: &ScanGrid2D, a: &Matrix2<f64>) -> Option<[f64; 2]> {
    let ai = a.try_inverse()?;
    Some([
        scan.axis_x.extent() * ai[(0, 0)].abs().max(ai[(1, 0)].abs()),
        scan.axis_y.extent() * ai[(0, 1)].abs().max(ai[(1, 1)].abs()),
    ])
}

fn detect(scan: &ScanGrid2D, params: &DetectionParams) -> Result<(Vec<Point>, Matrix2<f64>)> {
    if let Some(w) = &scan.warning {
        return Err(Error::CalibrationInsufficient(w.clone()));
    }
    let basis = estimate_basis(scan)?;
    let covered = periods_covered(scan, &basis)
        .ok_or_else(|| Error::AmbiguousBasis("estimated basis is singular".into()))?;
    if covered.iter().any(|&c| c < params.min_periods) {
        return Err(Error::CalibrationInsufficient(format!(
            "scan covers {:.2} × {:.2} lattice periods; at least {} per axis needed",
            covered[0], covered[1], params.min_periods
        )));
    }

    let raw = scan.inverted();
    let s = smooth(&raw, params.smoothing_px);
    let mut sorted: Vec<f64> = s.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let max = sorted[sorted.len() - 1];
    if !(max - median > 1e-12) {
        return Err(Error::CalibrationInsufficient("scan is flat".into()));
    }
    let threshold = median + params.threshold_fraction * (max - median);
    let mut candidates = local_maxima(&s, threshold);
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2));

    let radius = 0.5 * basis.column(0).norm().min(basis.column(1).norm());
    let mut kept: Vec<Point> = Vec::new();
    for (iy, ix, _) in candidates {
        let p = scan.pixel_to_coords(ix as f64, iy as f64);
        if kept.iter().any(|q| (q[0] - p[0]).hypot(q[1] - p[1]) < radius) {
            continue;
        }
        kept.push(p);
    }
    let centers: Vec<Point> = kept
        .iter()
        .filter_map(|p| {
            let ix = ((p[0] - scan.axis_x.start) / scan.axis_x.step()).round() as usize;
            let iy = ((p[1] - scan.axis_y.start) / scan.axis_y.step()).round() as usize;
            let (ry, rx) = refine_peak(&raw, iy, ix)?;
            Some(scan.pixel_to_coords(rx, ry))
        })
        .collect();
    if centers.len() < 3 {
        return Err(Error::CalibrationInsufficient(format!("found {} centers, need at least 3", centers.len())));
    }
    Ok((centers, basis))
}

/// Finds the feature centers of a scan, in scan coordinates, with sub-pixel
/// refinement.
///
/// The map is inverted and smoothed, local maxima above threshold are
/// collected, and non-maximum suppression at half the shortest lattice
/// period (from [`estimate_basis`]) removes duplicates.
pub fn detect_centers_auto(scan: &ScanGrid2D) -> Result<Vec<Point>> {
    detect(scan, &DetectionParams::default()).map(|(c, _)| c)
}

pub fn detect_centers_with(scan: &ScanGrid2D, params: &DetectionParams) -> Result<Vec<Point>> {
    detect(scan, params).map(|(c, _)| c)
}

// ---------------------------------------------------------------------------
// Indexing and fitting

fn check_spread(points: &[Point]) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::DegenerateCenters(format!("need at least 3 centers, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let cov = Matrix2::new(sxx, sxy, sxy, syy);
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::DegenerateCenters("centers are collinear".into()));
    }
    Ok(())
}

fn assign_within(
    centers: &[Point],
    basis: &Matrix2<f64>,
    reference: Point,
    limit: Option<f64>,
) -> Result<IndexAssignment> {
    let scale = basis.abs().max();
    if !(basis.determinant().abs() > 1e-9 * scale * scale) {
        return Err(Error::AmbiguousBasis("basis guess is (nearly) singular".into()));
    }
    let inv = basis.try_inverse().ok_or_else(|| Error::AmbiguousBasis("basis guess is singular".into()))?;
    let mut indexed: Vec<IndexedCenter> = Vec::new();
    let mut rejected = Vec::new();
    for &c in centers {
        let f = inv * Vector2::new(c[0] - reference[0], c[1] - reference[1]);
        if let Some(l) = limit {
            if f.abs().max() > l {
                continue;
            }
        }
        let m = [f[0].round() as i64, f[1].round() as i64];
        let residual = (f[0] - m[0] as f64).hypot(f[1] - m[1] as f64);
        if residual > INDEX_RESIDUAL_LIMIT {
            rejected.push(c);
            continue;
        }
        match indexed.iter().position(|e| e.index == m) {
            Some(k) if indexed[k].rounding_residual <= residual => rejected.push(c),
            Some(k) => {
                rejected.push(indexed[k].position);
                indexed[k] = IndexedCenter { position: c, index: m, rounding_residual: residual };
            }
            None => indexed.push(IndexedCenter { position: c, index: m, rounding_residual: residual }),
        }
    }
    Ok(IndexAssignment { indexed, rejected })
}

/// Assigns integer lattice indices `round(basis⁻¹·(center − reference))`.
///
/// Centers whose rounding residual exceeds 0.25 lattice units are rejected;
/// when two centers round to the same index the closer one is kept.
pub fn assign_lattice_indices(centers: &[Point], basis: &Matrix2<f64>, reference: Point) -> Result<IndexAssignment> {
    check_spread(centers)?;
    assign_within(centers, basis, reference, None)
}

fn fit_lattice(indexed: &[IndexedCenter], source: CenterSource) -> Result<LatticeFit> {
    let k = indexed.len();
    if k < 3 {
        return Err(Error::DegenerateCenters(format!("need at least 3 indexed centers, got {k}")));
    }
    let design = DMatrix::from_fn(k, 3, |r, c| match c {
        0 => indexed[r].index[0] as f64,
        1 => indexed[r].index[1] as f64,
        _ => 1.0,
    });
    let targets = DMatrix::from_fn(k, 2, |r, c| indexed[r].position[c]);
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    if !(sv.min() > 1e-10 * sv.max()) {
        return Err(Error::DegenerateCenters("lattice indices are collinear".into()));
    }
    let coef = svd.solve(&targets, 0.0).map_err(|e| Error::DegenerateCenters(e.to_string()))?;
    let a = Matrix2::new(coef[(0, 0)], coef[(1, 0)], coef[(0, 1)], coef[(1, 1)]);
    let origin = [coef[(2, 0)], coef[(2, 1)]];
    let ssr: f64 = (0..k)
        .map(|r| {
            let m = indexed[r].index;
            let px = a[(0, 0)] * m[0] as f64 + a[(0, 1)] * m[1] as f64 + origin[0];
            let py = a[(1, 0)] * m[0] as f64 + a[(1, 1)] * m[1] as f64 + origin[1];
            (px - indexed[r].position[0]).powi(2) + (py - indexed[r].position[1]).powi(2)
        })
        .sum();
    Ok(LatticeFit {
        primitive_vectors: from_na(&a),
        origin,
        residual_rms: (ssr / k as f64).sqrt(),
        n_centers_used: k,
        center_source: source,
    })
}

/// Least-squares fit of `u_k ≈ A·(m_k, n_k) + b` and the correction
/// `T = A`, `offset = b`.
pub fn fit_affine(
    indexed: &[IndexedCenter],
    source: CenterSource,
    axes: [String; 2],
) -> Result<(LatticeFit, AffineCorrection)> {
    let fit = fit_lattice(indexed, source)?;
    let correction = AffineCorrection::new(axes, fit.primitive_vectors, fit.origin)
        .map_err(|_| Error::DegenerateCenters("fitted lattice basis is singular".into()))?;
    Ok((fit, correction))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub centers: Vec<Point>,
    pub indexed: Vec<IndexedCenter>,
    pub rejected: Vec<Point>,
    pub fit: LatticeFit,
    pub correction: AffineCorrection,
}

/// Indexes `centers` starting from basis guess `guess`, refits, and repeats
/// until the index set is stable. The first pass only uses centers within
/// 1.6 lattice units of the center nearest the centroid, so a rough guess
/// only needs to be right locally.
fn index_and_fit(
    centers: &[Point],
    guess: &Matrix2<f64>,
    source: CenterSource,
    axes: [String; 2],
) -> Result<Calibration> {
    check_spread(centers)?;
    let n = centers.len() as f64;
    let centroid = [centers.iter().map(|p| p[0]).sum::<f64>() / n, centers.iter().map(|p| p[1]).sum::<f64>() / n];
    let reference = *centers
        .iter()
        .min_by(|a, b| {
            let da = (a[0] - centroid[0]).hypot(a[1] - centroid[1]);
            let db = (b[0] - centroid[0]).hypot(b[1] - centroid[1]);
            da.total_cmp(&db)
        })
        .expect("nonempty");

    let mut basis = *guess;
    let mut origin = reference;
    let mut previous: Option<Vec<IndexedCenter>> = None;
    let mut assignment = None;
    for pass in 0..8 {
        let limit = (pass == 0).then_some(1.6);
        let asg = assign_within(centers, &basis, origin, limit)?;
        if asg.indexed.len() < 3 {
            return Err(Error::CalibrationInsufficient(format!(
                "only {} centers index onto the lattice",
                asg.indexed.len()
            )));
        }
        let fit = fit_lattice(&asg.indexed, source)?;
        basis = fit.basis();
        origin = fit.origin;
        let stable = previous.as_ref() == Some(&asg.indexed);
        previous = Some(asg.indexed.clone());
        assignment = Some(asg);
        if stable {
            break;
        }
    }
    let asg = assignment.expect("at least one pass");

    // Canonical basis, origin at the lattice point nearest zero.
    let (canon, u) = canonical_basis(&basis);
    let det = u[(0, 0)] * u[(1, 1)] - u[(0, 1)] * u[(1, 0)];
    let u_inv = Matrix2::new(u[(1, 1)], -u[(0, 1)], -u[(1, 0)], u[(0, 0)]) * det;
    let shift = lattice_shift_to_origin(&canon, &Vector2::new(origin[0], origin[1]));
    let indexed: Vec<IndexedCenter> = asg
        .indexed
        .iter()
        .map(|e| {
            let m = u_inv * Vector2::new(e.index[0], e.index[1]);
            IndexedCenter { index: [m[0] - shift[0], m[1] - shift[1]], ..e.clone() }
        })
        .collect();
    let (fit, correction) = fit_affine(&indexed, source, axes)?;
    let rejected = centers.iter().filter(|c| !indexed.iter().any(|e| &e.position == *c)).copied().collect();
    Ok(Calibration { centers: centers.to_vec(), indexed, rejected, fit, correction })
}

/// Full automatic pipeline on one scan: detect, index, fit.
///
/// On a corrected scan the returned correction is relative to the one the
/// scan was taken with; see [`AffineCorrection::compose`].
pub fn calibrate_auto(scan: &ScanGrid2D, params: &DetectionParams) -> Result<Calibration> {
    let (centers, basis) = detect(scan, params)?;
    index_and_fit(&centers, &basis, CenterSource::Automatic, [scan.axis_x.label.clone(), scan.axis_y.label.clone()])
}

/// Lagrange-reduced basis spanned by pairwise differences of `centers`.
pub fn basis_from_centers(centers: &[Point]) -> Result<Matrix2<f64>> {
    check_spread(centers)?;
    let mut diffs: Vec<Vector2<f64>> = Vec::new();
    for (i, a) in centers.iter().enumerate() {
        for b in &centers[i + 1..] {
            diffs.push(Vector2::new(b[0] - a[0], b[1] - a[1]));
        }
    }
    diffs.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let scale = diffs.last().map(|d| d.norm()).unwrap_or(0.0);
    let mut iter = diffs.iter().filter(|d| d.norm() > 1e-9 * scale);
    let mut d1 = *iter.next().ok_or_else(|| Error::DegenerateCenters("centers coincide".into()))?;
    let min_sin = 0.3;
    let mut d2 = *iter
        .find(|d| (d1.x * d.y - d1.y * d.x).abs() > min_sin * d1.norm() * d.norm())
        .ok_or_else(|| Error::DegenerateCenters("centers are collinear".into()))?;
    for _ in 0..64 {
        if d2.norm_squared() < d1.norm_squared() {
            std::mem::swap(&mut d1, &mut d2);
        }
        let mu = (d1.dot(&d2) / d1.norm_squared()).round();
        if mu == 0.0 {
            break;
        }
        d2 -= d1 * mu;
    }
    Ok(canonical_basis(&Matrix2::from_columns(&[d1, d2])).0)
}

/// Fits manually identified centers. Without explicit indices, a basis is
/// inferred from the center differences and indices are assigned from it.
pub fn fit_manual_centers(
    centers: &[Point],
    indices: Option<&[[i64; 2]]>,
    axes: [String; 2],
) -> Result<Calibration> {
    check_spread(centers)?;
    match indices {
        Some(idx) => {
            if idx.len() != centers.len() {
                return Err(Error::DimensionMismatch { expected: centers.len(), got: idx.len() });
            }
            let indexed: Vec<IndexedCenter> = centers
                .iter()
                .zip(idx)
                .map(|(&position, &index)| IndexedCenter { position, index, rounding_residual: 0.0 })
                .collect();
            let (fit, correction) = fit_affine(&indexed, CenterSource::Manual, axes)?;
            Ok(Calibration { centers: centers.to_vec(), indexed, rejected: Vec::new(), fit, correction })
        }
        None => {
            let guess = basis_from_centers(centers)?;
            index_and_fit(centers, &guess, CenterSource::Manual, axes)
        }
    }
}

// ---------------------------------------------------------------------------
// Verification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    /// Angle of each refitted primitive vector from its coordinate axis.
    pub axis_angle_errors_deg: [f64; 2],
    /// max(|A₀₁|/|A₁₁|, |A₁₀|/|A₀₀|) of the refitted basis.
    pub residual_offdiag_fraction: f64,
    pub refit: LatticeFit,
    pub scan_seed: u64,
}

/// Off-diagonal fraction and axis angles of a lattice basis.
pub fn orthogonality_metrics(a: &Mat2) -> (f64, [f64; 2]) {
    let frac = (a[0][1].abs() / a[1][1].abs()).max(a[1][0].abs() / a[0][0].abs());
    let angle_x = a[1][0].atan2(a[0][0]).to_degrees();
    let angle_y = (-a[0][1]).atan2(a[1][1]).to_degrees();
    (frac, [angle_x.abs(), angle_y.abs()])
}

/// Rescans with `correction` applied, recalibrates in corrected coordinates
/// and reports how far the refitted lattice is from the coordinate axes.
///
/// `request` describes the corrected-coordinate window; its axis labels must
/// match the correction.
pub fn verify_orthogonality(
    device: &DeviceTruth,
    correction: &AffineCorrection,
    request: &ScanRequest,
    params: &DetectionParams,
) -> Result<OrthogonalityReport> {
    correction.validate()?;
    let scan = scan_transmission(device, request, Some(correction))?;
    let cal = calibrate_auto(&scan, params)?;
    let (frac, angles) = orthogonality_metrics(&cal.fit.primitive_vectors);
    Ok(OrthogonalityReport {
        axis_angle_errors_deg: angles,
        residual_offdiag_fraction: frac,
        refit: cal.fit,
        scan_seed: request.seed,
    })
}

/// Calibrates every qubit's own X/Z line pair independently, each with the
/// window and acquisition of `template`. Qubit `q` uses seed
/// `template.seed + q`.
pub fn calibrate_blockwise(
    device: &DeviceTruth,
    template: &ScanRequest,
    params: &DetectionParams,
) -> Result<Vec<Calibration>> {
    (0..device.n_qubits())
        .map(|q| {
            let mut req = template.clone();
            req.axis_x.label = channel_label(2 * q);
            req.axis_y.label = channel_label(2 * q + 1);
            req.seed = template.seed.wrapping_add(q as u64);
            let scan = scan_transmission(device, &req, None)?;
            calibrate_auto(&scan, params)
        })
        .collect()
}
