// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Self-contained descriptions of every CLI workflow.
//!
//! A [`Job`] carries all of its inputs (device configuration, correction,
//! centers, seeds), never paths, so the job stored in a [`RunRecord`] can be
//! re-run elsewhere and produces the same output bytes.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use fluxqa_core::anneal::{
    bitstring, classical_ground_space, evolve_closed, evolve_open, find_min_gap, instantaneous_spectrum,
    search_small_gap_instances, success_probability, AnnealSchedule, InstanceFamily, IsingProblem, NoiseSpec,
    QuantumState,
};
use fluxqa_core::characterization::{
    default_ramsey_delays, default_t1_delays, fit_decay, physicality_warning, residual_table, simulate_ramsey_trace,
    simulate_t1_trace, DecayTrace, TraceKind,
};
use fluxqa_core::device::{build_device, channel_label, DeviceConfig};
use fluxqa_core::ode::Tolerance;
use fluxqa_core::readout::{histogram, simulate_shots, QubitState, ResonatorParams};
use fluxqa_core::textio::TextMatrix;
use fluxqa_core::xtalk::{
    calibrate_auto, fit_manual_centers, scan_transmission, verify_orthogonality, AcquisitionMode, AcquisitionParams,
    AffineCorrection, DetectionParams, Point, ScanRequest, DEFAULT_HALF_WIDTH, DEFAULT_POINTS,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{read_file, write_file, Result, ServiceError};

pub const SOFTWARE: &str = "fluxqa";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Scan window and acquisition settings, independent of the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanWindow {
    pub axes: [String; 2],
    pub n_points: usize,
    /// The window is `[−half_width, half_width]` on both axes, Φ0.
    pub half_width: f64,
    pub mode: AcquisitionMode,
    /// Defaults to the device's configured scan noise.
    pub noise_sigma: Option<f64>,
    pub probe_ghz: Option<f64>,
}

impl ScanWindow {
    pub fn for_qubit(q: usize) -> Self {
        Self {
            axes: [channel_label(2 * q), channel_label(2 * q + 1)],
            n_points: DEFAULT_POINTS,
            half_width: DEFAULT_HALF_WIDTH,
            mode: AcquisitionMode::Sawtooth,
            noise_sigma: None,
            probe_ghz: None,
        }
    }

    pub fn request(&self, seed: u64) -> ScanRequest {
        let mut r = ScanRequest::square(&self.axes[0], &self.axes[1], self.half_width, self.n_points);
        r.acquisition = match self.mode {
            AcquisitionMode::Raster => AcquisitionParams::raster(),
            AcquisitionMode::Sawtooth => AcquisitionParams::sawtooth(),
        };
        r.noise_sigma = self.noise_sigma;
        r.probe_ghz = self.probe_ghz;
        r.seed = seed;
        r
    }

    /// Same window in the coordinates of `correction`.
    pub fn verification_request(&self, correction: &AffineCorrection, seed: u64) -> ScanRequest {
        let w = ScanWindow { axes: correction.axes.clone(), ..self.clone() };
        w.request(seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceJob {
    pub config: DeviceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanJob {
    pub device: DeviceConfig,
    pub window: ScanWindow,
    pub correction: Option<AffineCorrection>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibrateMode {
    /// Scan with the job seed, detect and fit.
    Auto,
    /// Fit user-supplied centers, with optional lattice indices.
    Manual { centers: Vec<Point>, indices: Option<Vec<[i64; 2]>> },
    /// Only verify an existing correction.
    Verify { correction: AffineCorrection },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateJob {
    pub device: DeviceConfig,
    pub window: ScanWindow,
    pub mode: CalibrateMode,
    pub detection: DetectionParams,
    /// Rescan with the new correction and report orthogonality. Always on
    /// in verify mode.
    pub verify: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    T1,
    Ramsey,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizeJob {
    pub experiment: Experiment,
    pub t1_ns: f64,
    pub t2_star_ns: f64,
    pub detuning_mhz: f64,
    pub noise_sigma: f64,
    /// Fit this trace instead of simulating.
    pub trace: Option<DecayTrace>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutJob {
    pub resonator: ResonatorParams,
    pub probe_ghz: f64,
    pub integration_us: f64,
    pub shots: usize,
    pub bins: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealJob {
    pub problem_name: String,
    pub problem: IsingProblem,
    pub schedule: AnnealSchedule,
    /// Closed-system evolution when absent.
    pub noise: Option<NoiseSpec>,
    pub gap_resolution: usize,
    /// Points of the instantaneous spectrum table; 0 skips it.
    pub spectrum_points: usize,
    pub atol: f64,
    pub rtol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGapsJob {
    pub family: InstanceFamily,
    pub schedule: AnnealSchedule,
    pub n_samples: usize,
    pub resolution: usize,
    pub top: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Device(DeviceJob),
    Scan(ScanJob),
    Calibrate(CalibrateJob),
    Characterize(CharacterizeJob),
    Readout(ReadoutJob),
    Anneal(AnnealJob),
    SearchGaps(SearchGapsJob),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Device,
    Scan,
    Fit,
    Characterize,
    Readout,
    Anneal,
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Device(_) => "device",
            Job::Scan(_) => "scan",
            Job::Calibrate(_) => "calibrate",
            Job::Characterize(_) => "characterize",
            Job::Readout(_) => "readout",
            Job::Anneal(_) => "anneal",
            Job::SearchGaps(_) => "search-gaps",
        }
    }

    pub fn kind(&self) -> RunKind {
        match self {
            Job::Device(_) => RunKind::Device,
            Job::Scan(_) => RunKind::Scan,
            Job::Calibrate(_) => RunKind::Fit,
            Job::Characterize(_) => RunKind::Characterize,
            Job::Readout(_) => RunKind::Readout,
            Job::Anneal(_) | Job::SearchGaps(_) => RunKind::Anneal,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Job::Device(j) => j.config.seed,
            Job::Scan(j) => j.seed,
            Job::Calibrate(j) => j.seed,
            Job::Characterize(j) => j.seed,
            Job::Readout(j) => j.seed,
            Job::Anneal(_) => 0,
            Job::SearchGaps(j) => j.seed,
        }
    }

    pub fn record_file(&self) -> String {
        format!("{}.record.json", self.name())
    }
}

/// Everything one run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub software: String,
    pub version: String,
    pub kind: RunKind,
    pub seed: u64,
    pub job: Job,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    /// Headline numbers of the result.
    pub summary: Value,
    pub wall_time_s: f64,
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_file(&self.dir.join(name), contents.as_bytes())?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, &to_json(value))
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}

/// Runs `job`, writes its outputs and its record into `out_dir`.
pub fn execute(job: &Job, out_dir: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let mut out = Outputs { dir: out_dir, files: Vec::new() };
    let summary = match job {
        Job::Device(j) => run_device(j, &mut out)?,
        Job::Scan(j) => run_scan(j, &mut out)?,
        Job::Calibrate(j) => run_calibrate(j, &mut out)?,
        Job::Characterize(j) => run_characterize(j, &mut out)?,
        Job::Readout(j) => run_readout(j, &mut out)?,
        Job::Anneal(j) => run_anneal(j, &mut out)?,
        Job::SearchGaps(j) => run_search(j, &mut out)?,
    };
    let record = RunRecord {
        software: SOFTWARE.into(),
        version: VERSION.into(),
        kind: job.kind(),
        seed: job.seed(),
        job: job.clone(),
        outputs: out.files,
        summary,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_file(&out_dir.join(job.record_file()), to_json(&record).as_bytes())?;
    Ok(record)
}

/// Re-runs the job stored in a record file.
pub fn replay(record_path: &Path, out_dir: &Path) -> Result<RunRecord> {
    let text = read_file(record_path)?;
    let record: RunRecord =
        serde_json::from_str(&text).map_err(|e| ServiceError::invalid(format!("{}: {e}", record_path.display())))?;
    execute(&record.job, out_dir)
}

fn run_device(j: &DeviceJob, out: &mut Outputs) -> Result<Value> {
    let truth = build_device(&j.config)?;
    out.write("device.toml", &j.config.to_toml_string()?)?;
    out.json("device_truth.json", &truth)?;
    Ok(json!({
        "n_qubits": truth.n_qubits(),
        "n_lines": truth.n_lines(),
        "max_crosstalk_ratio": truth.max_crosstalk_ratio(),
    }))
}

fn run_scan(j: &ScanJob, out: &mut Outputs) -> Result<Value> {
    let truth = build_device(&j.device)?;
    let window = match &j.correction {
        Some(c) => ScanWindow { axes: c.axes.clone(), ..j.window.clone() },
        None => j.window.clone(),
    };
    let scan = scan_transmission(&truth, &window.request(j.seed), j.correction.as_ref())?;
    out.write("scan.txt", &scan.to_text())?;
    Ok(json!({
        "axes": window.axes,
        "corrected": scan.corrected,
        "simulated_acquisition_s": scan.acquisition.total_time_s,
        "warning": scan.warning,
    }))
}

fn run_calibrate(j: &CalibrateJob, out: &mut Outputs) -> Result<Value> {
    let truth = build_device(&j.device)?;
    let (correction, verify_seed) = match &j.mode {
        CalibrateMode::Verify { correction } => (correction.clone(), j.seed),
        mode => {
            let cal = match mode {
                CalibrateMode::Auto => {
                    let scan = scan_transmission(&truth, &j.window.request(j.seed), None)?;
                    calibrate_auto(&scan, &j.detection)?
                }
                CalibrateMode::Manual { centers, indices } => {
                    fit_manual_centers(centers, indices.as_deref(), j.window.axes.clone())?
                }
                CalibrateMode::Verify { .. } => unreachable!(),
            };
            out.write("correction.toml", &cal.correction.to_toml_string()?)?;
            out.json("calibration.json", &cal)?;
            (cal.correction, j.seed.wrapping_add(1))
        }
    };
    let mut summary = json!({
        "correction": correction,
    });
    if j.verify || matches!(j.mode, CalibrateMode::Verify { .. }) {
        let req = j.window.verification_request(&correction, verify_seed);
        let report = verify_orthogonality(&truth, &correction, &req, &j.detection)?;
        out.json("verification.json", &report)?;
        summary["residual_offdiag_fraction"] = json!(report.residual_offdiag_fraction);
        summary["axis_angle_errors_deg"] = json!(report.axis_angle_errors_deg);
    }
    Ok(summary)
}

fn characterize_one(trace: &DecayTrace, out: &mut Outputs) -> Result<Value> {
    let stem = match trace.kind {
        TraceKind::T1Decay => "t1",
        TraceKind::Ramsey => "ramsey",
    };
    let fit = fit_decay(trace)?;
    out.write(&format!("{stem}_trace.txt"), &trace.to_matrix().to_text())?;
    out.json(&format!("{stem}_fit.json"), &fit)?;
    out.write(&format!("{stem}_residuals.txt"), &residual_table(trace, &fit).to_text())?;
    Ok(json!({ "time_constant_ns": fit.time_constant_ns, "fit_rms": fit.fit_rms }))
}

fn run_characterize(j: &CharacterizeJob, out: &mut Outputs) -> Result<Value> {
    if let Some(trace) = &j.trace {
        return characterize_one(trace, out);
    }
    let mut summary = json!({});
    if matches!(j.experiment, Experiment::T1 | Experiment::Both) {
        let trace = simulate_t1_trace(j.t1_ns, &default_t1_delays(j.t1_ns), j.noise_sigma, j.seed)?;
        summary["t1"] = characterize_one(&trace, out)?;
    }
    if matches!(j.experiment, Experiment::Ramsey | Experiment::Both) {
        let delays = default_ramsey_delays(j.t2_star_ns, j.detuning_mhz);
        let trace = simulate_ramsey_trace(j.t2_star_ns, j.detuning_mhz, &delays, j.noise_sigma, j.seed.wrapping_add(1))?;
        summary["ramsey"] = characterize_one(&trace, out)?;
    }
    if j.experiment == Experiment::Both {
        summary["physicality_warning"] = json!(physicality_warning(j.t1_ns, j.t2_star_ns));
    }
    Ok(summary)
}

fn run_readout(j: &ReadoutJob, out: &mut Outputs) -> Result<Value> {
    j.resonator.validate()?;
    let down = simulate_shots(&j.resonator, QubitState::Down, j.probe_ghz, j.integration_us, j.shots, j.seed)?;
    let up =
        simulate_shots(&j.resonator, QubitState::Up, j.probe_ghz, j.integration_us, j.shots, j.seed.wrapping_add(1))?;
    let h = histogram(&down, &up, j.bins)?;
    out.write("shots_down.txt", &down.to_text())?;
    out.write("shots_up.txt", &up.to_text())?;
    let mut table = TextMatrix::default();
    table.push_header("kind", "histogram");
    table.push_header("threshold", h.discrimination.threshold);
    table.push_header("columns", "bin_low bin_high count_down count_up");
    for (k, w) in h.edges.windows(2).enumerate() {
        table.rows.push(vec![w[0], w[1], h.counts_down[k] as f64, h.counts_up[k] as f64]);
    }
    out.write("histogram.txt", &table.to_text())?;
    out.json("discrimination.json", &h.discrimination)?;
    let d = &h.discrimination;
    Ok(json!({
        "separation_sigma": d.separation_sigma,
        "misclassified": d.misclassified_down + d.misclassified_up,
        "analytic_error": d.analytic_error,
        "fidelity_estimate": d.fidelity_estimate,
    }))
}

fn run_anneal(j: &AnnealJob, out: &mut Outputs) -> Result<Value> {
    let p = &j.problem;
    j.schedule.validate()?;
    let tol = Tolerance { atol: j.atol, rtol: j.rtol, max_step: f64::INFINITY };
    let gap = find_min_gap(p, &j.schedule, j.gap_resolution)?;
    out.json("min_gap.json", &gap)?;

    if j.spectrum_points > 0 {
        let k = p.dim().min(8);
        let mut table = TextMatrix::default();
        table.push_header("kind", "spectrum");
        let cols: Vec<String> = (0..k).map(|i| format!("e{i}_ghz")).collect();
        table.push_header("columns", format!("s {}", cols.join(" ")));
        let n = j.spectrum_points.max(2);
        for i in 0..n {
            let s = i as f64 / (n - 1) as f64;
            let pt = instantaneous_spectrum(p, &j.schedule, s, k)?;
            let mut row = vec![s];
            row.extend(pt.eigenvalues);
            table.rows.push(row);
        }
        out.write("spectrum.txt", &table.to_text())?;
    }

    let (state, mut summary) = match &j.noise {
        None => {
            let run = evolve_closed(p, &j.schedule, None, tol)?;
            let summary = json!({
                "norm_drift": run.norm_drift,
                "steps_accepted": run.stats.accepted,
                "steps_rejected": run.stats.rejected,
            });
            (QuantumState::Pure(run.state), summary)
        }
        Some(noise) => {
            let run = evolve_open(p, &j.schedule, noise, None, tol)?;
            let summary = json!({
                "trace_drift": run.trace_drift,
                "hermiticity_error": run.hermiticity_error,
                "min_eigenvalue": run.min_eigenvalue,
                "steps_accepted": run.stats.accepted,
                "steps_rejected": run.stats.rejected,
            });
            (QuantumState::Mixed(run.rho), summary)
        }
    };
    let ground = classical_ground_space(p);
    let success = success_probability(&state, p)?;
    let mut text = String::new();
    let _ = writeln!(text, "# problem: {}", j.problem_name);
    let _ = writeln!(text, "# t_f_ns: {}", j.schedule.t_f_ns);
    let _ = writeln!(text, "# success_probability: {success}");
    let _ = writeln!(text, "# columns: bitstring population classical_energy ground");
    for (b, pop) in state.populations().iter().enumerate() {
        let is_ground = u8::from(ground.states.contains(&b));
        let _ = writeln!(text, "{} {pop} {} {is_ground}", bitstring(b, p.n), p.classical_energy(b));
    }
    out.write("populations.txt", &text)?;
    summary["success_probability"] = json!(success);
    summary["ground_degeneracy"] = json!(ground.degeneracy());
    summary["min_gap_ghz"] = json!(gap.gap_ghz);
    summary["s_star"] = json!(gap.s_star);
    out.json("anneal_summary.json", &summary)?;
    Ok(summary)
}

fn run_search(j: &SearchGapsJob, out: &mut Outputs) -> Result<Value> {
    let mut report = search_small_gap_instances(&j.family, &j.schedule, j.n_samples, j.seed, j.resolution)?;
    report.ranking.truncate(j.top);
    out.json("gap_search.json", &report)?;
    let mut text = String::from("# columns: rank sample min_gap_ghz s_star degeneracy h... J...\n");
    for r in &report.ranking {
        let _ = write!(text, "{} {} {} {} {}", r.rank, r.sample, r.min_gap.gap_ghz, r.min_gap.s_star, r.min_gap.degeneracy);
        for h in &r.problem.h {
            let _ = write!(text, " {h}");
        }
        for (_, _, v) in &r.problem.couplings {
            let _ = write!(text, " {v}");
        }
        text.push('\n');
    }
    out.write("gap_ranking.txt", &text)?;
    Ok(json!({
        "smallest_gap_ghz": report.ranking.first().map(|r| r.min_gap.gap_ghz),
        "n_ranked": report.ranking.len(),
    }))
}
