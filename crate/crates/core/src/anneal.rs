// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Transverse-field Ising dynamics for small annealing problems.
//!
//! The Hamiltonian is
//!
//! ```text
//! H(s) = −A(s)/2 · Σ σx_i + B(s)/2 · (Σ h_i σz_i + Σ J_ij σz_i σz_j)
//! ```
//!
//! with A, B in GHz. Basis state `b` has spin `σz_i = +1` (up) when bit `i`
//! of `b` is set, so bitstrings read most-significant qubit first, e.g.
//! `"011"` is qubit 0 and 1 up, qubit 2 down.
//!
//! Time is in ns and the propagator is `exp(−2πi·H·t)`: energies are
//! ordinary (not angular) frequencies. Dephasing and relaxation rates are
//! given in 1/μs at the interface.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{self, StepStats, Tolerance};

pub const MAX_QUBITS_CLOSED: usize = 8;
pub const MAX_QUBITS_OPEN: usize = 6;
pub const MIN_GAP_RESOLUTION: usize = 64;
pub const DEFAULT_A0_GHZ: f64 = 5.0;
pub const DEFAULT_B0_GHZ: f64 = 5.0;

const PLANCK: f64 = 6.626_070_15e-34;
/// Energies closer than this (relative to the spectral scale) are treated
/// as one degenerate level.
const DEGENERACY_TOL: f64 = 1e-9;

type C64 = Complex64;

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

// ---------------------------------------------------------------------------
// Problems

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsingProblem {
    pub n: usize,
    pub h: Vec<f64>,
    /// `(i, j, J_ij)` with `i < j`, sorted and unique.
    pub couplings: Vec<(usize, usize, f64)>,
}

/// Allowed coefficient magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRange {
    pub h_max: f64,
    pub j_max: f64,
}

impl Default for CoefficientRange {
    fn default() -> Self {
        Self { h_max: 2.0, j_max: 1.0 }
    }
}

impl IsingProblem {
    /// Builds and validates a problem against the default coefficient range.
    /// Couplings are normalized to `i < j` and sorted.
    pub fn new(n: usize, h: Vec<f64>, couplings: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut couplings: Vec<_> =
            couplings.into_iter().map(|(i, j, v)| if i <= j { (i, j, v) } else { (j, i, v) }).collect();
        couplings.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let p = Self { n, h, couplings };
        p.validate(CoefficientRange::default())?;
        Ok(p)
    }

    /// Fully connected three-qubit triangle.
    pub fn k3(h: [f64; 3], j: [f64; 3]) -> Result<Self> {
        Self::new(3, h.to_vec(), vec![(0, 1, j[0]), (0, 2, j[1]), (1, 2, j[2])])
    }

    /// Uniform antiferromagnetic triangle, `h = 0`, `J = +1`.
    pub fn k3_afm() -> Self {
        Self::k3([0.0; 3], [1.0; 3]).expect("valid by construction")
    }

    pub fn validate(&self, range: CoefficientRange) -> Result<()> {
        if self.n == 0 || self.n > MAX_QUBITS_CLOSED {
            return Err(Error::invalid(format!("qubit count {} outside 1..={MAX_QUBITS_CLOSED}", self.n)));
        }
        if self.h.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: self.h.len() });
        }
        if let Some(v) = self.h.iter().find(|v| !v.is_finite() || v.abs() > range.h_max) {
            return Err(Error::invalid(format!("|h| = {v} exceeds {}", range.h_max)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j, v) in &self.couplings {
            if i == j {
                return Err(Error::invalid(format!("self-coupling on qubit {i}")));
            }
            if i > j || j >= self.n {
                return Err(Error::invalid(format!("coupling ({i}, {j}) out of range for n = {}", self.n)));
            }
            if !seen.insert((i, j)) {
                return Err(Error::invalid(format!("duplicate coupling ({i}, {j})")));
            }
            if !v.is_finite() || v.abs() > range.j_max {
                return Err(Error::invalid(format!("|J| = {v} exceeds {}", range.j_max)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        1 << self.n
    }

    /// `σz_i` eigenvalue of basis state `b`.
    pub fn spin(b: usize, i: usize) -> f64 {
        if b >> i & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// `Σ h_i z_i + Σ J_ij z_i z_j` for basis state `b`.
    pub fn classical_energy(&self, b: usize) -> f64 {
        let z = |i| Self::spin(b, i);
        let field: f64 = self.h.iter().enumerate().map(|(i, h)| h * z(i)).sum();
        let bond: f64 = self.couplings.iter().map(|&(i, j, v)| v * z(i) * z(j)).sum();
        field + bond
    }

    /// Multiplies every coefficient by `k` without range checks.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            n: self.n,
            h: self.h.iter().map(|v| v * k).collect(),
            couplings: self.couplings.iter().map(|&(i, j, v)| (i, j, v * k)).collect(),
        }
    }

    /// Plain-text form: `n`, then `h i value` and `J i j value` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("n {}\n", self.n);
        for (i, v) in self.h.iter().enumerate() {
            let _ = writeln!(out, "h {i} {v:?}");
        }
        for &(i, j, v) in &self.couplings {
            let _ = writeln!(out, "J {i} {j} {v:?}");
        }
        out
    }

    /// Parses [`to_text`](Self::to_text) output. `#` starts a comment;
    /// unspecified fields default to zero.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut n = None;
        let mut h = BTreeMap::new();
        let mut couplings = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("line {}: `{raw}`", lineno + 1));
            let tok: Vec<&str> = line.split_whitespace().collect();
            let idx = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let val = |s: &str| s.parse::<f64>().map_err(|_| bad());
            match tok.as_slice() {
                ["n", v] => n = Some(idx(v)?),
                ["h", i, v] => {
                    if h.insert(idx(i)?, val(v)?).is_some() {
                        return Err(Error::Parse(format!("line {}: repeated field", lineno + 1)));
                    }
                }
                ["J", i, j, v] => couplings.push((idx(i)?, idx(j)?, val(v)?)),
                _ => return Err(bad()),
            }
        }
        let n = n.ok_or_else(|| Error::Parse("missing `n` line".into()))?;
        if let Some((&i, _)) = h.iter().find(|(&i, _)| i >= n) {
            return Err(Error::Parse(format!("field index {i} out of range for n = {n}")));
        }
        let h = (0..n).map(|i| h.get(&i).copied().unwrap_or(0.0)).collect();
        Self::new(n, h, couplings)
    }
}

/// Lowest classical energy and every basis state within tolerance of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundSpace {
    pub energy: f64,
    pub states: Vec<usize>,
}

impl GroundSpace {
    pub fn degeneracy(&self) -> usize {
        self.states.len()
    }
}

/// Exhaustive minimization over all `2ⁿ` bitstrings.
pub fn classical_ground_space(problem: &IsingProblem) -> GroundSpace {
    let energies: Vec<f64> = (0..problem.dim()).map(|b| problem.classical_energy(b)).collect();
    let energy = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = energies.iter().fold(1.0f64, |m, e| m.max(e.abs()));
    let states = (0..energies.len()).filter(|&b| energies[b] - energy <= DEGENERACY_TOL * scale).collect();
    GroundSpace { energy, states }
}

/// Bitstring label of basis state `b`, qubit `n − 1` first.
pub fn bitstring(b: usize, n: usize) -> String {
    (0..n).rev().map(|i| if b >> i & 1 == 1 { '1' } else { '0' }).collect()
}

// ---------------------------------------------------------------------------
// Schedules

/// One envelope over `s ∈ [0, 1]`, in GHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelope {
    Linear { start: f64, end: f64 },
    /// Piecewise linear through `(s, value)` knots, `s` strictly increasing
    /// from 0 to 1.
    Tabulated { s: Vec<f64>, values: Vec<f64> },
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    ys[k - 1] + (ys[k] - ys[k - 1]) * (x - x0) / (x1 - x0)
}

fn check_table(xs: &[f64], ys: &[f64], what: &str) -> Result<()> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(Error::invalid(format!("{what}: need at least two (x, y) pairs of equal length")));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) || xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what}: abscissae must be finite and strictly increasing")));
    }
    Ok(())
}

impl Envelope {
    pub fn at(&self, s: f64) -> f64 {
        match self {
            Envelope::Linear { start, end } => start + (end - start) * s,
            Envelope::Tabulated { s: xs, values } => interp(xs, values, s),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Envelope::Linear { start, end } => {
                if !(start.is_finite() && end.is_finite()) || *start < 0.0 || *end < 0.0 {
                    return Err(Error::invalid(format!("envelope {name} must be finite and nonnegative")));
                }
            }
            Envelope::Tabulated { s, values } => {
                check_table(s, values, name)?;
                if s[0] != 0.0 || s[s.len() - 1] != 1.0 {
                    return Err(Error::invalid(format!("envelope {name} must span s = 0 to 1")));
                }
                if values.iter().any(|&v| v < 0.0) {
                    return Err(Error::invalid(format!("envelope {name} must be nonnegative")));
                }
            }
        }
        Ok(())
    }

    /// Reads a two-column `s value` table; `#` starts a comment.
    pub fn from_table_text(text: &str) -> Result<Self> {
        let (s, values) = parse_two_columns(text)?;
        let env = Envelope::Tabulated { s, values };
        env.validate("table")?;
        Ok(env)
    }

    pub fn to_table_text(&self, n_points: usize) -> String {
        let mut out = String::from("# s value_ghz\n");
        match self {
            Envelope::Tabulated { s, values } => {
                for (x, y) in s.iter().zip(values) {
                    let _ = writeln!(out, "{x:?} {y:?}");
                }
            }
            Envelope::Linear { .. } => {
                let n = n_points.max(2);
                for k in 0..n {
                    let x = k as f64 / (n - 1) as f64;
                    let _ = writeln!(out, "{x:?} {:?}", self.at(x));
                }
            }
        }
        out
    }
}

fn parse_two_columns(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<f64> = line
            .split(|ch: char| ch.is_whitespace() || ch == ',')
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("line {}: `{raw}`", lineno + 1)))?;
        let [x, y] = cols[..] else {
            return Err(Error::Parse(format!("line {}: expected two columns", lineno + 1)));
        };
        xs.push(x);
        ys.push(y);
    }
    Ok((xs, ys))
}

/// Map from normalized time `u = t/t_f` to `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeMapping {
    #[default]
    Linear,
    /// Piecewise linear through `(u, s)` knots.
    Tabulated { u: Vec<f64>, s: Vec<f64> },
}

impl TimeMapping {
    pub fn at(&self, u: f64) -> f64 {
        match self {
            TimeMapping::Linear => u.clamp(0.0, 1.0),
            TimeMapping::Tabulated { u: xs, s } => interp(xs, s, u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub a: Envelope,
    pub b: Envelope,
    pub t_f_ns: f64,
    #[serde(default)]
    pub s_of_t: TimeMapping,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_A0_GHZ, DEFAULT_B0_GHZ, 100.0)
    }
}

impl AnnealSchedule {
    /// `A = A0·(1 − s)`, `B = B0·s`, `s = t/t_f`.
    pub fn linear(a0: f64, b0: f64, t_f_ns: f64) -> Self {
        Self {
            a: Envelope::Linear { start: a0, end: 0.0 },
            b: Envelope::Linear { start: 0.0, end: b0 },
            t_f_ns,
            s_of_t: TimeMapping::Linear,
        }
    }

    pub fn with_t_f(mut self, t_f_ns: f64) -> Self {
        self.t_f_ns = t_f_ns;
        self
    }

    /// Stays at `s` for the whole duration.
    pub fn hold(mut self, s: f64, t_f_ns: f64) -> Self {
        self.t_f_ns = t_f_ns;
        self.s_of_t = TimeMapping::Tabulated { u: vec![0.0, 1.0], s: vec![s, s] };
        self
    }

    pub fn envelopes(&self, s: f64) -> (f64, f64) {
        (self.a.at(s), self.b.at(s))
    }

    pub fn s_at(&self, t_ns: f64) -> f64 {
        if self.t_f_ns > 0.0 {
            self.s_of_t.at(t_ns / self.t_f_ns)
        } else {
            self.s_of_t.at(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.a.validate("A")?;
        self.b.validate("B")?;
        if !(self.t_f_ns.is_finite() && self.t_f_ns >= 0.0) {
            return Err(Error::invalid("t_f must be finite and nonnegative"));
        }
        if let TimeMapping::Tabulated { u, s } = &self.s_of_t {
            check_table(u, s, "s(t)")?;
            if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("s(t) values must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Flux controls

/// Lookup from loop fluxes to schedule quantities.
///
/// `A(Φx)` is a monotone piecewise-linear table. The default passes through
/// 4.2 GHz at Φx = 670 mΦ0, the qubit frequency at that bias with Φz ≈ 0.
/// The Z-loop flux sets the bias energy `ε = 2·Ip·Φz / h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxScheduleMap {
    pub phi_x_mphi0: Vec<f64>,
    pub a_ghz: Vec<f64>,
    pub ip_na: f64,
}

impl Default for FluxScheduleMap {
    fn default() -> Self {
        Self {
            phi_x_mphi0: vec![600.0, 670.0, 750.0, 850.0, 1000.0],
            a_ghz: vec![5.0, 4.2, 2.0, 0.5, 0.0],
            ip_na: 50.0,
        }
    }
}

impl FluxScheduleMap {
    pub fn validate(&self) -> Result<()> {
        check_table(&self.phi_x_mphi0, &self.a_ghz, "flux map")?;
        let d: Vec<f64> = self.a_ghz.windows(2).map(|w| w[1] - w[0]).collect();
        if !(d.iter().all(|&v| v <= 0.0) || d.iter().all(|&v| v >= 0.0)) {
            return Err(Error::invalid("A(Φx) table must be monotone"));
        }
        if !(self.ip_na > 0.0) {
            return Err(Error::invalid("persistent current must be positive"));
        }
        Ok(())
    }

    pub fn a_at(&self, phi_x_mphi0: f64) -> f64 {
        interp(&self.phi_x_mphi0, &self.a_ghz, phi_x_mphi0)
    }

    /// `2·Ip·Φz / h` in GHz.
    pub fn epsilon_ghz(&self, phi_z_mphi0: f64) -> f64 {
        let phi_wb = phi_z_mphi0 * 1e-3 * crate::device::FLUX_QUANTUM_WB;
        2.0 * self.ip_na * 1e-9 * phi_wb / PLANCK * 1e-9
    }

    /// Tabulated A envelope for a flux ramp sampled uniformly in `s`.
    pub fn envelope_from_ramp(&self, phi_x_path_mphi0: &[f64]) -> Result<Envelope> {
        if phi_x_path_mphi0.len() < 2 {
            return Err(Error::invalid("flux ramp needs at least two samples"));
        }
        let n = phi_x_path_mphi0.len();
        let s = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
        let values = phi_x_path_mphi0.iter().map(|&p| self.a_at(p)).collect();
        Ok(Envelope::Tabulated { s, values })
    }
}

// ---------------------------------------------------------------------------
// Hamiltonians and spectra

/// `Σ σx_i` and the classical energy diagonal, from which `H(s)` is a cheap
/// linear combination.
#[derive(Debug, Clone)]
pub struct HamiltonianTerms {
    pub driver: DMatrix<f64>,
    pub energies: DVector<f64>,
}

impl HamiltonianTerms {
    pub fn new(problem: &IsingProblem) -> Result<Self> {
        problem.validate(CoefficientRange { h_max: f64::INFINITY, j_max: f64::INFINITY })?;
        let d = problem.dim();
        let mut driver = DMatrix::zeros(d, d);
        for b in 0..d {
            for i in 0..problem.n {
                driver[(b ^ (1 << i), b)] = 1.0;
            }
        }
        let energies = DVector::from_fn(d, |b, _| problem.classical_energy(b));
        Ok(Self { driver, energies })
    }

    pub fn at(&self, a: f64, b: f64) -> DMatrix<f64> {
        let mut h = &self.driver * (-0.5 * a);
        for k in 0..self.energies.len() {
            h[(k, k)] += 0.5 * b * self.energies[k];
        }
        h
    }
}

pub fn build_hamiltonian(problem: &IsingProblem, schedule: &AnnealSchedule, s: f64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("s = {s} outside [0, 1]")));
    }
    schedule.validate()?;
    let (a, b) = schedule.envelopes(s);
    Ok(HamiltonianTerms::new(problem)?.at(a, b))
}

/// Eigenvalues ascending with matching eigenvector columns.
pub fn sorted_eigen(h: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = h.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..h.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(h.nrows(), h.nrows(), |r, k| eig.eigenvectors[(r, order[k])]);
    (values, vectors)
}

fn sorted_eigenvalues(h: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub s: f64,
    /// Lowest `k` levels, ascending, GHz.
    pub eigenvalues: Vec<f64>,
    /// `E1 − E0`, GHz.
    pub gap: f64,
}

pub fn instantaneous_spectrum(
    problem: &IsingProblem,
    schedule: &AnnealSchedule,
    s: f64,
    k: usize,
) -> Result<SpectrumPoint> {
    let dim = problem.dim();
    if k == 0 || k > dim {
        return Err(Error::invalid(format!("level count {k} outside 1..={dim}")));
    }
    let all = sorted_eigenvalues(&build_hamiltonian(problem, schedule, s)?);
    let gap = if dim > 1 { (all[1] - all[0]).max(0.0) } else { 0.0 };
    Ok(SpectrumPoint { s, eigenvalues: all[..k].to_vec(), gap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinGapReport {
    pub s_star: f64,
    pub gap_ghz: f64,
    /// Classical ground degeneracy `g`; the gap is `E_g − E_0`.
    pub degeneracy: usize,
    pub resolution: usize,
    pub evaluations: usize,
}

struct GapFn<'a> {
    terms: HamiltonianTerms,
    schedule: &'a AnnealSchedule,
    level: usize,
    evaluations: usize,
}

impl GapFn<'_> {
    fn at(&mut self, s: f64) -> f64 {
        self.evaluations += 1;
        let (a, b) = self.schedule.envelopes(s);
        let e = sorted_eigenvalues(&self.terms.at(a, b));
        e[self.level] - e[0]
    }
}

fn golden_min(f: &mut impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Smallest excitation gap over `s ∈ [0, 1]`.
///
/// A coarse grid of `resolution` points brackets every local minimum; the
/// three lowest are refined by golden-section search and the best kept.
/// When the classical ground space is `g`-fold degenerate the gap is
/// measured to level `g`, the first level above that space.
pub fn find_min_gap(problem: &IsingProblem, schedule: &AnnealSchedule, resolution: usize) -> Result<MinGapReport> {
    if resolution < MIN_GAP_RESOLUTION {
        return Err(Error::invalid(format!("resolution {resolution} below {MIN_GAP_RESOLUTION}")));
    }
    schedule.validate()?;
    let degeneracy = classical_ground_space(problem).degeneracy();
    if degeneracy >= problem.dim() {
        return Err(Error::invalid("every bitstring is a ground state; there is no excitation gap"));
    }
    let mut g = GapFn { terms: HamiltonianTerms::new(problem)?, schedule, level: degeneracy, evaluations: 0 };
    let grid: Vec<f64> = (0..resolution).map(|k| k as f64 / (resolution - 1) as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&s| g.at(s)).collect();

    let mut minima: Vec<usize> = (0..resolution)
        .filter(|&k| (k == 0 || vals[k] <= vals[k - 1]) && (k + 1 == resolution || vals[k] <= vals[k + 1]))
        .collect();
    minima.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    minima.truncate(3);

    let mut best = (grid[minima[0]], vals[minima[0]]);
    for k in minima {
        let lo = grid[k.saturating_sub(1)];
        let hi = grid[(k + 1).min(resolution - 1)];
        let (s, v) = golden_min(&mut |s| g.at(s), lo, hi, 1e-9);
        for cand in [(s, v), (grid[k], vals[k])] {
            if cand.1 < best.1 {
                best = cand;
            }
        }
    }
    Ok(MinGapReport {
        s_star: best.0,
        gap_ghz: best.1,
        degeneracy,
        resolution,
        evaluations: g.evaluations,
    })
}

// ---------------------------------------------------------------------------
// Instance search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceFamily {
    /// Uniform draws of every field and listed coupling.
    Random { n: usize, edges: Vec<(usize, usize)>, h_range: [f64; 2], j_range: [f64; 2] },
    Fixed { problems: Vec<IsingProblem> },
}

impl InstanceFamily {
    /// Triangle with `h ∈ [−1, 1]` and `J ∈ [−1, 1]`.
    pub fn k3_default() -> Self {
        InstanceFamily::Random {
            n: 3,
            edges: vec![(0, 1), (0, 2), (1, 2)],
            h_range: [-1.0, 1.0],
            j_range: [-1.0, 1.0],
        }
    }

    fn draw(&self, seed: u64, index: usize) -> Result<IsingProblem> {
        match self {
            InstanceFamily::Fixed { problems } => Ok(problems[index].clone()),
            InstanceFamily::Random { n, edges, h_range, j_range } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                let mut uni = |r: &[f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] };
                let h = (0..*n).map(|_| uni(h_range)).collect();
                let couplings = edges.iter().map(|&(i, j)| (i, j, uni(j_range))).collect();
                IsingProblem::new(*n, h, couplings)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedInstance {
    pub rank: usize,
    /// Draw index; with the search seed this reproduces the instance.
    pub sample: usize,
    pub problem: IsingProblem,
    pub min_gap: MinGapReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSearchReport {
    pub seed: u64,
    pub n_samples: usize,
    pub resolution: usize,
    pub family: InstanceFamily,
    pub schedule: AnnealSchedule,
    /// Ascending minimum gap; ties keep draw order.
    pub ranking: Vec<RankedInstance>,
}

/// Scores `n_samples` draws from `family` by minimum gap. A fixed family
/// ranks its listed problems and ignores `n_samples`.
///
/// Draw `k` uses its own RNG stream of `seed`, so results do not depend
/// on thread scheduling.
pub fn search_small_gap_instances(
    family: &InstanceFamily,
    schedule: &AnnealSchedule,
    n_samples: usize,
    seed: u64,
    resolution: usize,
) -> Result<GapSearchReport> {
    let count = match family {
        InstanceFamily::Fixed { problems } => problems.len(),
        InstanceFamily::Random { .. } => n_samples,
    };
    if count == 0 {
        return Err(Error::invalid("instance family is empty"));
    }
    let mut ranking = (0..count)
        .into_par_iter()
        .map(|k| {
            let problem = family.draw(seed, k)?;
            let min_gap = find_min_gap(&problem, schedule, resolution)?;
            Ok(RankedInstance { rank: 0, sample: k, problem, min_gap })
        })
        .collect::<Result<Vec<_>>>()?;
    ranking.sort_by(|a, b| a.min_gap.gap_ghz.total_cmp(&b.min_gap.gap_ghz).then(a.sample.cmp(&b.sample)));
    for (r, item) in ranking.iter_mut().enumerate() {
        item.rank = r;
    }
    Ok(GapSearchReport {
        seed,
        n_samples: count,
        resolution,
        family: family.clone(),
        schedule: schedule.clone(),
        ranking,
    })
}

// ---------------------------------------------------------------------------
// States

#[derive(Debug, Clone, PartialEq)]
pub enum QuantumState {
    Pure(DVector<C64>),
    Mixed(DMatrix<C64>),
}

impl QuantumState {
    pub fn dim(&self) -> usize {
        match self {
            QuantumState::Pure(v) => v.len(),
            QuantumState::Mixed(m) => m.nrows(),
        }
    }

    pub fn basis(dim: usize, b: usize) -> Self {
        let mut v = DVector::zeros(dim);
        v[b] = c(1.0);
        QuantumState::Pure(v)
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        QuantumState::Mixed(DMatrix::identity(dim, dim) * c(1.0 / dim as f64))
    }

    pub fn density_matrix(&self) -> DMatrix<C64> {
        match self {
            QuantumState::Pure(v) => v * v.adjoint(),
            QuantumState::Mixed(m) => m.clone(),
        }
    }

    /// Diagonal in the computational basis.
    pub fn populations(&self) -> Vec<f64> {
        match self {
            QuantumState::Pure(v) => v.iter().map(|a| a.norm_sqr()).collect(),
            QuantumState::Mixed(m) => (0..m.nrows()).map(|k| m[(k, k)].re).collect(),
        }
    }

    /// Checks unit norm or trace (1e-8) and, for mixed states, Hermiticity
    /// (1e-10) and positivity (eigenvalues ≥ −1e-8).
    pub fn validate(&self) -> Result<()> {
        match self {
            QuantumState::Pure(v) => {
                let drift = (v.norm() - 1.0).abs();
                if drift > 1e-8 {
                    return Err(Error::invalid(format!("state norm off by {drift:.3e}")));
                }
            }
            QuantumState::Mixed(m) => {
                if !m.is_square() {
                    return Err(Error::invalid("density matrix must be square"));
                }
                let drift = (m.trace().re - 1.0).abs();
                if drift > 1e-8 {
                    return Err(Error::invalid(format!("trace off by {drift:.3e}")));
                }
                let herm = hermiticity_error(m);
                if herm > 1e-10 {
                    return Err(Error::invalid(format!("density matrix not Hermitian ({herm:.3e})")));
                }
                let min = min_eigenvalue(m);
                if min < -1e-8 {
                    return Err(Error::invalid(format!("density matrix has eigenvalue {min:.3e}")));
                }
            }
        }
        Ok(())
    }
}

fn hermiticity_error(m: &DMatrix<C64>) -> f64 {
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    let sym = (m + m.adjoint()) * c(0.5);
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Population of the classical ground space.
pub fn success_probability(state: &QuantumState, problem: &IsingProblem) -> Result<f64> {
    if state.dim() != problem.dim() {
        return Err(Error::DimensionMismatch { expected: problem.dim(), got: state.dim() });
    }
    let pops = state.populations();
    let p: f64 = classical_ground_space(problem).states.iter().map(|&b| pops[b]).sum();
    Ok(p.clamp(0.0, 1.0))
}

/// Ground state of `H(0)`. With no problem term at `s = 0` this is the
/// uniform superposition.
pub fn initial_ground_state(problem: &IsingProblem, schedule: &AnnealSchedule) -> Result<DVector<C64>> {
    let s0 = schedule.s_at(0.0);
    let (a, b) = schedule.envelopes(s0);
    let d = problem.dim();
    if b == 0.0 && a > 0.0 {
        return Ok(DVector::from_element(d, c(1.0 / (d as f64).sqrt())));
    }
    let (_, v) = sorted_eigen(&build_hamiltonian(problem, schedule, s0)?);
    Ok(v.column(0).map(c))
}

// ---------------------------------------------------------------------------
// Closed-system evolution

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedRun {
    pub state: DVector<C64>,
    pub norm_drift: f64,
    pub stats: StepStats,
}

fn default_max_step(tol: Tolerance, t_f: f64) -> Tolerance {
    if tol.max_step.is_finite() {
        tol
    } else {
        Tolerance { max_step: t_f / 20.0, ..tol }
    }
}

/// Integrates `dψ/dt = −2πi·H(t)·ψ` over `[0, t_f]` for an arbitrary
/// real-symmetric `H(t)` in GHz.
pub fn evolve_closed_with<F>(h_of_t: F, t_f_ns: f64, psi0: DVector<C64>, tol: Tolerance) -> Result<ClosedRun>
where
    F: Fn(f64) -> DMatrix<f64>,
{
    let norm0 = psi0.norm();
    if (norm0 - 1.0).abs() > 1e-8 {
        return Err(Error::invalid(format!("initial state norm {norm0}")));
    }
    let phase = C64::new(0.0, -2.0 * PI);
    let rhs = |t: f64, psi: &DVector<C64>| {
        let h = h_of_t(t).map(c);
        (h * psi) * phase
    };
    let (state, stats) = ode::integrate(rhs, 0.0, t_f_ns, psi0, default_max_step(tol, t_f_ns), |_, _| {})
        .map_err(|e| Error::StepUnderflow { s: e.t / t_f_ns })?;
    let norm_drift = (state.norm() - 1.0).abs();
    Ok(ClosedRun { state, norm_drift, stats })
}

/// Schrödinger evolution along the schedule. `initial` defaults to the
/// ground state of `H(0)`.
pub fn evolve_closed(
    problem: &IsingProblem,
    schedule: &AnnealSchedule,
    initial: Option<DVector<C64>>,
    tol: Tolerance,
) -> Result<ClosedRun> {
    schedule.validate()?;
    let terms = HamiltonianTerms::new(problem)?;
    let psi0 = match initial {
        Some(v) if v.len() != problem.dim() => {
            return Err(Error::DimensionMismatch { expected: problem.dim(), got: v.len() })
        }
        Some(v) => v,
        None => initial_ground_state(problem, schedule)?,
    };
    let h_of_t = |t: f64| {
        let (a, b) = schedule.envelopes(schedule.s_at(t));
        terms.at(a, b)
    };
    evolve_closed_with(h_of_t, schedule.t_f_ns, psi0, tol)
}

// ---------------------------------------------------------------------------
// Open-system evolution

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoherenceBasis {
    #[default]
    InstantaneousEigenbasis,
    Computational,
}

impl std::fmt::Display for DecoherenceBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoherenceBasis::InstantaneousEigenbasis => "eigenbasis",
            DecoherenceBasis::Computational => "computational",
        })
    }
}

impl std::str::FromStr for DecoherenceBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eigenbasis" | "instantaneous_eigenbasis" => Ok(DecoherenceBasis::InstantaneousEigenbasis),
            "computational" => Ok(DecoherenceBasis::Computational),
            other => Err(Error::Parse(format!("unknown decoherence basis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Relaxation {
    /// `k_B·T / h`, GHz.
    pub temperature_ghz: f64,
    /// Zero-temperature downward rate per GHz of transition energy, 1/μs.
    pub coupling_rate_per_us: f64,
    /// When false, only downward jumps at the zero-temperature rate occur.
    pub detailed_balance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseSpec {
    pub basis: DecoherenceBasis,
    /// Decay rate of the dephased coherences, 1/μs.
    pub dephasing_rate_per_us: f64,
    pub relaxation: Option<Relaxation>,
}

impl NoiseSpec {
    pub fn dephasing(basis: DecoherenceBasis, rate_per_us: f64) -> Self {
        Self { basis, dephasing_rate_per_us: rate_per_us, relaxation: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dephasing_rate_per_us >= 0.0 && self.dephasing_rate_per_us.is_finite()) {
            return Err(Error::invalid("dephasing rate must be finite and nonnegative"));
        }
        if let Some(r) = self.relaxation {
            if !(r.coupling_rate_per_us >= 0.0 && r.coupling_rate_per_us.is_finite()) {
                return Err(Error::invalid("relaxation coupling rate must be finite and nonnegative"));
            }
            if !(r.temperature_ghz > 0.0) {
                return Err(Error::invalid("bath temperature must be positive when relaxation is enabled"));
            }
        }
        Ok(())
    }
}

/// Ohmic transition rate for a jump releasing energy `omega_ghz`
/// (negative for absorption), in the units of `coupling`:
/// `coupling·ω / (1 − e^{−ω/T})`, which tends to `coupling·T` at `ω = 0`.
pub fn ohmic_rate(omega_ghz: f64, temperature_ghz: f64, coupling: f64) -> f64 {
    let x = omega_ghz / temperature_ghz;
    if x.abs() < 1e-8 {
        return coupling * temperature_ghz * (1.0 + x / 2.0);
    }
    coupling * omega_ghz / -(-x).exp_m1()
}

fn jump_rate(r: &Relaxation, omega_ghz: f64) -> f64 {
    let coupling = r.coupling_rate_per_us * 1e-3;
    if r.detailed_balance {
        ohmic_rate(omega_ghz, r.temperature_ghz, coupling)
    } else {
        coupling * omega_ghz.max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenRun {
    pub rho: DMatrix<C64>,
    pub trace_drift: f64,
    pub hermiticity_error: f64,
    pub min_eigenvalue: f64,
    pub stats: StepStats,
}

struct Lindblad<'a> {
    terms: HamiltonianTerms,
    schedule: &'a AnnealSchedule,
    noise: NoiseSpec,
    sigma_x: Vec<DMatrix<f64>>,
    hamming: DMatrix<f64>,
}

/// Groups ascending eigenvalues into degenerate clusters.
fn clusters(values: &[f64]) -> Vec<std::ops::Range<usize>> {
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..=values.len() {
        if k == values.len() || values[k] - values[k - 1] > DEGENERACY_TOL * scale {
            out.push(start..k);
            start = k;
        }
    }
    out
}

impl Lindblad<'_> {
    fn new<'a>(problem: &IsingProblem, schedule: &'a AnnealSchedule, noise: NoiseSpec) -> Result<Lindblad<'a>> {
        let d = problem.dim();
        let sigma_x = (0..problem.n)
            .map(|i| DMatrix::from_fn(d, d, |r, k| if r == k ^ (1 << i) { 1.0 } else { 0.0 }))
            .collect();
        let hamming = DMatrix::from_fn(d, d, |a, b| (a ^ b).count_ones() as f64);
        Ok(Lindblad { terms: HamiltonianTerms::new(problem)?, schedule, noise, sigma_x, hamming })
    }

    fn rhs(&self, t: f64, rho: &DMatrix<C64>) -> DMatrix<C64> {
        let (a, b) = self.schedule.envelopes(self.schedule.s_at(t));
        let h = self.terms.at(a, b);
        let hc = h.map(c);
        let mut out = (&hc * rho - rho * &hc) * C64::new(0.0, -2.0 * PI);

        let gamma = self.noise.dephasing_rate_per_us * 1e-3;
        let eig_dephasing = gamma > 0.0 && self.noise.basis == DecoherenceBasis::InstantaneousEigenbasis;
        if eig_dephasing || self.noise.relaxation.is_some() {
            out += self.eigenbasis_dissipator(&h, rho, if eig_dephasing { gamma } else { 0.0 });
        }
        if gamma > 0.0 && self.noise.basis == DecoherenceBasis::Computational {
            out.zip_zip_apply(rho, &self.hamming, |o, r, dist| *o -= r * (gamma * dist));
        }
        // Exact in exact arithmetic; stops rounding from accumulating.
        (&out + out.adjoint()) * c(0.5)
    }

    /// Dephasing between eigenspaces plus Ohmic jumps between them, with
    /// jump operators `P_c' σx_i P_c` for each pair of eigenspaces.
    fn eigenbasis_dissipator(&self, h: &DMatrix<f64>, rho: &DMatrix<C64>, gamma: f64) -> DMatrix<C64> {
        let (e, v) = sorted_eigen(h);
        let vc = v.map(c);
        let rt = vc.transpose() * rho * &vc;
        let d = e.len();
        let groups = clusters(&e);
        let mut label = vec![0; d];
        for (g, r) in groups.iter().enumerate() {
            label[r.clone()].iter_mut().for_each(|l| *l = g);
        }

        let mut dt = DMatrix::<C64>::zeros(d, d);
        if gamma > 0.0 {
            for x in 0..d {
                for y in 0..d {
                    if label[x] != label[y] {
                        dt[(x, y)] = -rt[(x, y)] * gamma;
                    }
                }
            }
        }

        if let Some(relax) = &self.noise.relaxation {
            // K accumulates Σ rate·L†L, block diagonal over clusters.
            let mut k = DMatrix::<f64>::zeros(d, d);
            for sx in &self.sigma_x {
                let xt = v.transpose() * sx * &v;
                for src in &groups {
                    let rho_src = rt.view((src.start, src.start), (src.len(), src.len())).into_owned();
                    for dst in &groups {
                        let omega = e[src.start] - e[dst.start];
                        let rate = jump_rate(relax, omega);
                        if rate == 0.0 {
                            continue;
                        }
                        let l = xt.view((dst.start, src.start), (dst.len(), src.len())).into_owned();
                        let lc = l.map(c);
                        let gain = &lc * &rho_src * lc.transpose() * c(rate);
                        let mut block = dt.view_mut((dst.start, dst.start), (dst.len(), dst.len()));
                        block += gain;
                        let mut kb = k.view_mut((src.start, src.start), (src.len(), src.len()));
                        kb += l.transpose() * &l * rate;
                    }
                }
            }
            let kc = k.map(c);
            dt -= (&kc * &rt + &rt * &kc) * c(0.5);
        }
        &vc * dt * vc.transpose()
    }
}

/// Lindblad evolution along the schedule. `initial` defaults to the pure
/// ground state of `H(0)`.
///
/// Eigenbasis dephasing damps coherences between distinct instantaneous
/// eigenspaces at the dephasing rate. Computational dephasing applies
/// `√(γ/2)·σz_i` on every qubit, so a coherence between bitstrings at
/// Hamming distance `k` decays at `k·γ`. Relaxation, when enabled, always
/// acts between instantaneous eigenspaces through each qubit's `σx`.
pub fn evolve_open(
    problem: &IsingProblem,
    schedule: &AnnealSchedule,
    noise: &NoiseSpec,
    initial: Option<DMatrix<C64>>,
    tol: Tolerance,
) -> Result<OpenRun> {
    if problem.n > MAX_QUBITS_OPEN {
        return Err(Error::invalid(format!(
            "open-system evolution is limited to {MAX_QUBITS_OPEN} qubits, got {}",
            problem.n
        )));
    }
    schedule.validate()?;
    noise.validate()?;
    let rho0 = match initial {
        Some(m) => {
            let st = QuantumState::Mixed(m);
            if st.dim() != problem.dim() {
                return Err(Error::DimensionMismatch { expected: problem.dim(), got: st.dim() });
            }
            st.validate()?;
            st.density_matrix()
        }
        None => QuantumState::Pure(initial_ground_state(problem, schedule)?).density_matrix(),
    };
    let model = Lindblad::new(problem, schedule, *noise)?;
    let t_f = schedule.t_f_ns;
    let on_accept = |_t: f64, rho: &DMatrix<C64>| {
        debug_assert!((rho.trace().re - 1.0).abs() < 1e-6, "trace drifted to {}", rho.trace().re);
        debug_assert!(hermiticity_error(rho) < 1e-10, "density matrix lost Hermiticity");
    };
    let (rho, stats) = ode::integrate(|t, r| model.rhs(t, r), 0.0, t_f, rho0, default_max_step(tol, t_f), on_accept)
        .map_err(|e| Error::StepUnderflow { s: schedule.s_at(e.t) })?;
    Ok(OpenRun {
        trace_drift: (rho.trace().re - 1.0).abs(),
        hermiticity_error: hermiticity_error(&rho),
        min_eigenvalue: min_eigenvalue(&rho),
        rho,
        stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalPoint {
    pub temperature_ghz: f64,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalSweep {
    /// Ascending temperature.
    pub points: Vec<ThermalPoint>,
    /// Success never rises by more than 1e-3 from one temperature to the next.
    pub nonincreasing: bool,
}

/// Final ground-space population at each temperature, all other noise
/// parameters taken from `template` (which must enable relaxation).
pub fn thermal_depopulation_sweep(
    problem: &IsingProblem,
    schedule: &AnnealSchedule,
    template: &NoiseSpec,
    temperatures_ghz: &[f64],
    tol: Tolerance,
) -> Result<ThermalSweep> {
    if temperatures_ghz.len() < 3 {
        return Err(Error::invalid("a thermal sweep needs at least three temperatures"));
    }
    let Some(relax) = template.relaxation else {
        return Err(Error::invalid("thermal sweep template must enable relaxation"));
    };
    let mut temps = temperatures_ghz.to_vec();
    temps.sort_by(f64::total_cmp);
    let points = temps
        .par_iter()
        .map(|&t| {
            let noise = NoiseSpec { relaxation: Some(Relaxation { temperature_ghz: t, ..relax }), ..*template };
            let run = evolve_open(problem, schedule, &noise, None, tol)?;
            let success = success_probability(&QuantumState::Mixed(run.rho), problem)?;
            Ok(ThermalPoint { temperature_ghz: t, success })
        })
        .collect::<Result<Vec<_>>>()?;
    let nonincreasing = points.windows(2).all(|w| w[1].success <= w[0].success + 1e-3);
    Ok(ThermalSweep { points, nonincreasing })
}

/// Gibbs populations of the diagonal Hamiltonian `B/2·E(z)` at `T`.
pub fn gibbs_populations(problem: &IsingProblem, b_ghz: f64, temperature_ghz: f64) -> Vec<f64> {
    let e: Vec<f64> = (0..problem.dim()).map(|k| 0.5 * b_ghz * problem.classical_energy(k)).collect();
    let e0 = e.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = e.iter().map(|x| (-(x - e0) / temperature_ghz).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}
