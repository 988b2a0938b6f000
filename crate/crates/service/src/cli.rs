// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Argument parsing and dispatch for the `fluxqa` binary.

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fluxqa_core::anneal::{
    AnnealSchedule, DecoherenceBasis, InstanceFamily, IsingProblem, NoiseSpec, Relaxation, MIN_GAP_RESOLUTION,
};
use fluxqa_core::characterization::DecayTrace;
use fluxqa_core::device::DeviceConfig;
use fluxqa_core::readout::{ResonatorParams, DEFAULT_INTEGRATION_US, DEFAULT_PROBE_GHZ};
use fluxqa_core::textio::TextMatrix;
use fluxqa_core::xtalk::{AcquisitionMode, AffineCorrection, DetectionParams, Point, DEFAULT_HALF_WIDTH, DEFAULT_POINTS};

use crate::error::{read_file, Result, ServiceError};
use crate::jobs::*;
use crate::server::{serve, ServerConfig};

#[derive(Debug, Parser)]
#[command(name = "fluxqa", version, about = "Flux-qubit annealing testbed simulator")]
pub struct Cli {
    /// Directory for output files and run records.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a device and write its configuration and hidden truth.
    Device(DeviceCmd),
    /// Simulate a 2D transmission scan.
    Scan(ScanCmd),
    /// Fit a crosstalk correction, or verify an existing one.
    Calibrate(CalibrateCmd),
    /// Simulate and fit T1 and Ramsey traces.
    Characterize(CharacterizeCmd),
    /// Simulate single-shot readout and discriminate.
    Readout(ReadoutCmd),
    /// Anneal an Ising problem and report populations and the minimum gap.
    Anneal(AnnealCmd),
    /// Rank random instances by minimum gap.
    SearchGaps(SearchGapsCmd),
    /// Run the REST service.
    Serve(ServeCmd),
    /// Re-run the job stored in a run record.
    Replay(ReplayCmd),
}

#[derive(Debug, Args)]
pub struct DeviceArgs {
    /// Device TOML written by `fluxqa device`; overrides the flags below.
    #[arg(long)]
    pub device: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub qubits: usize,
    /// Bound on off-diagonal crosstalk, as a fraction of the diagonal.
    #[arg(long, default_value_t = 0.3)]
    pub crosstalk: f64,
    #[arg(long, default_value_t = 0)]
    pub device_seed: u64,
    #[arg(long)]
    pub no_offsets: bool,
}

impl DeviceArgs {
    fn resolve(&self) -> Result<DeviceConfig> {
        if let Some(path) = &self.device {
            return Ok(DeviceConfig::from_toml_str(&read_file(path)?)?);
        }
        let mut c = DeviceConfig::with_qubits(self.qubits, self.crosstalk, self.device_seed);
        c.offsets_enabled = !self.no_offsets;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct WindowArgs {
    /// Scan this qubit's X and Z lines.
    #[arg(long, default_value_t = 0)]
    pub qubit: usize,
    /// Explicit line pair, e.g. `x0,z1`; overrides --qubit.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub axes: Option<Vec<String>>,
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    pub points: usize,
    /// Half-width of the square window, Φ0.
    #[arg(long, default_value_t = DEFAULT_HALF_WIDTH)]
    pub half_width: f64,
    #[arg(long, default_value = "sawtooth", value_parser = parse_mode)]
    pub mode: AcquisitionMode,
    /// Gaussian transmission noise; defaults to the device's scan noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Probe frequency, GHz; defaults to the resonator's f_down.
    #[arg(long)]
    pub probe: Option<f64>,
}

fn parse_mode(s: &str) -> std::result::Result<AcquisitionMode, String> {
    s.parse().map_err(|e: fluxqa_core::Error| e.to_string())
}

impl WindowArgs {
    fn resolve(&self) -> ScanWindow {
        let mut w = ScanWindow::for_qubit(self.qubit);
        if let Some(a) = &self.axes {
            w.axes = [a[0].clone(), a[1].clone()];
        }
        w.n_points = self.points;
        w.half_width = self.half_width;
        w.mode = self.mode;
        w.noise_sigma = self.noise;
        w.probe_ghz = self.probe;
        w
    }
}

#[derive(Debug, Args)]
pub struct DeviceCmd {
    #[command(flatten)]
    pub device: DeviceArgs,
}

#[derive(Debug, Args)]
pub struct ScanCmd {
    #[command(flatten)]
    pub device: DeviceArgs,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Correction TOML; the scan axes become its corrected coordinates.
    #[arg(long)]
    pub correction: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("calibration_mode").required(true).args(["auto", "centers", "verify"]))]
pub struct CalibrateCmd {
    #[command(flatten)]
    pub device: DeviceArgs,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Scan, detect centers and fit.
    #[arg(long)]
    pub auto: bool,
    /// Fit centers listed in a file, one `x y` or `x y m n` per line.
    #[arg(long)]
    pub centers: Option<PathBuf>,
    /// Verify the correction given by --correction.
    #[arg(long, requires = "correction")]
    pub verify: bool,
    #[arg(long)]
    pub correction: Option<PathBuf>,
    /// Skip the corrected rescan after --auto or --centers.
    #[arg(long)]
    pub no_verify: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CharacterizeCmd {
    #[arg(long, value_enum, default_value = "both")]
    pub experiment: Experiment,
    #[arg(long, default_value_t = 3500.0)]
    pub t1_ns: f64,
    #[arg(long, default_value_t = 130.0)]
    pub t2_star_ns: f64,
    #[arg(long, default_value_t = 5.0)]
    pub detuning_mhz: f64,
    /// Per-point population noise.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Fit this trace file instead of simulating.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReadoutCmd {
    /// Resonator parameters as TOML; defaults to the reference resonator.
    #[arg(long)]
    pub resonator: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PROBE_GHZ)]
    pub probe: f64,
    #[arg(long, default_value_t = DEFAULT_INTEGRATION_US)]
    pub integration_us: f64,
    /// Shots per prepared state.
    #[arg(long, default_value_t = 100_000)]
    pub shots: usize,
    #[arg(long, default_value_t = 80)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Anneal time, ns.
    #[arg(long, default_value_t = 100.0)]
    pub tf: f64,
    /// Transverse envelope A(0), GHz.
    #[arg(long, default_value_t = 5.0)]
    pub a0: f64,
    /// Problem envelope B(1), GHz.
    #[arg(long, default_value_t = 5.0)]
    pub b0: f64,
    /// Schedule TOML; overrides the linear envelopes (t_f still comes from --tf).
    #[arg(long)]
    pub schedule: Option<PathBuf>,
}

impl ScheduleArgs {
    fn resolve(&self) -> Result<AnnealSchedule> {
        let s = match &self.schedule {
            Some(path) => toml::from_str::<AnnealSchedule>(&read_file(path)?)
                .map_err(|e| ServiceError::invalid(format!("{}: {e}", path.display())))?
                .with_t_f(self.tf),
            None => AnnealSchedule::linear(self.a0, self.b0, self.tf),
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct AnnealCmd {
    /// `k3_afm` or a problem file.
    #[arg(long, default_value = "k3_afm")]
    pub problem: String,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Dephasing rate, 1/μs.
    #[arg(long)]
    pub dephasing: Option<f64>,
    #[arg(long, default_value = "eigenbasis", value_parser = parse_basis)]
    pub basis: DecoherenceBasis,
    /// Bath temperature k_B·T/h, GHz; enables relaxation.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Relaxation coupling, 1/μs per GHz.
    #[arg(long, default_value_t = 5.0)]
    pub coupling: f64,
    /// Only downward relaxation.
    #[arg(long)]
    pub no_detailed_balance: bool,
    #[arg(long, default_value_t = MIN_GAP_RESOLUTION)]
    pub gap_resolution: usize,
    /// Points in the spectrum table; 0 disables it.
    #[arg(long, default_value_t = 51)]
    pub spectrum_points: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub atol: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub rtol: f64,
}

fn parse_basis(s: &str) -> std::result::Result<DecoherenceBasis, String> {
    s.parse().map_err(|e: fluxqa_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SearchGapsCmd {
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = MIN_GAP_RESOLUTION)]
    pub resolution: usize,
    /// Keep this many smallest-gap instances.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeCmd {
    #[arg(long, env = "FLUXQA_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    #[arg(long, env = "FLUXQA_DATA_DIR", default_value = "fluxqa-data")]
    pub data_dir: PathBuf,
    /// Simulated scan durations are divided by this factor; `inf` disables waiting.
    #[arg(long, default_value_t = 100.0)]
    pub time_compression: f64,
}

#[derive(Debug, Args)]
pub struct ReplayCmd {
    /// Record file written by an earlier run.
    pub record: PathBuf,
}

fn parse_centers(text: &str) -> Result<(Vec<Point>, Option<Vec<[i64; 2]>>)> {
    let mut centers = Vec::new();
    let mut indices = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || ServiceError::invalid(format!("centers line {}: expected `x y` or `x y m n`", k + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 && f.len() != 4 {
            return Err(bad());
        }
        centers.push([f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?]);
        if f.len() == 4 {
            indices.push([f[2].parse().map_err(|_| bad())?, f[3].parse().map_err(|_| bad())?]);
        }
    }
    match indices.len() {
        0 => Ok((centers, None)),
        n if n == centers.len() => Ok((centers, Some(indices))),
        _ => Err(ServiceError::invalid("either every center has lattice indices or none does")),
    }
}

fn read_correction(path: &Path) -> Result<AffineCorrection> {
    Ok(AffineCorrection::from_toml_str(&read_file(path)?)?)
}

fn resolve_problem(name: &str) -> Result<IsingProblem> {
    match name {
        "k3_afm" => Ok(IsingProblem::k3_afm()),
        path => Ok(IsingProblem::from_text(&read_file(Path::new(path))?)?),
    }
}

/// Turns parsed arguments into a job, reading every referenced file.
pub fn build_job(command: &Command) -> Result<Option<Job>> {
    let job = match command {
        Command::Device(c) => Job::Device(DeviceJob { config: c.device.resolve()? }),
        Command::Scan(c) => Job::Scan(ScanJob {
            device: c.device.resolve()?,
            window: c.window.resolve(),
            correction: c.correction.as_deref().map(read_correction).transpose()?,
            seed: c.seed,
        }),
        Command::Calibrate(c) => {
            let mode = if c.auto {
                CalibrateMode::Auto
            } else if let Some(path) = &c.centers {
                let (centers, indices) = parse_centers(&read_file(path)?)?;
                CalibrateMode::Manual { centers, indices }
            } else {
                let path = c.correction.as_deref().expect("clap enforces --correction with --verify");
                CalibrateMode::Verify { correction: read_correction(path)? }
            };
            Job::Calibrate(CalibrateJob {
                device: c.device.resolve()?,
                window: c.window.resolve(),
                mode,
                detection: DetectionParams::default(),
                verify: !c.no_verify,
                seed: c.seed,
            })
        }
        Command::Characterize(c) => {
            let trace = match &c.trace {
                Some(path) => Some(DecayTrace::from_matrix(&TextMatrix::from_text(&read_file(path)?)?)?),
                None => None,
            };
            Job::Characterize(CharacterizeJob {
                experiment: c.experiment,
                t1_ns: c.t1_ns,
                t2_star_ns: c.t2_star_ns,
                detuning_mhz: c.detuning_mhz,
                noise_sigma: c.noise,
                trace,
                seed: c.seed,
            })
        }
        Command::Readout(c) => {
            let resonator = match &c.resonator {
                Some(path) => toml::from_str(&read_file(path)?)
                    .map_err(|e| ServiceError::invalid(format!("{}: {e}", path.display())))?,
                None => ResonatorParams::default(),
            };
            Job::Readout(ReadoutJob {
                resonator,
                probe_ghz: c.probe,
                integration_us: c.integration_us,
                shots: c.shots,
                bins: c.bins,
                seed: c.seed,
            })
        }
        Command::Anneal(c) => {
            let relaxation = c.temperature.map(|t| Relaxation {
                temperature_ghz: t,
                coupling_rate_per_us: c.coupling,
                detailed_balance: !c.no_detailed_balance,
            });
            let noise = (c.dephasing.is_some() || relaxation.is_some()).then(|| NoiseSpec {
                basis: c.basis,
                dephasing_rate_per_us: c.dephasing.unwrap_or(0.0),
                relaxation,
            });
            Job::Anneal(AnnealJob {
                problem_name: c.problem.clone(),
                problem: resolve_problem(&c.problem)?,
                schedule: c.schedule.resolve()?,
                noise,
                gap_resolution: c.gap_resolution,
                spectrum_points: c.spectrum_points,
                atol: c.atol,
                rtol: c.rtol,
            })
        }
        Command::SearchGaps(c) => Job::SearchGaps(SearchGapsJob {
            family: InstanceFamily::k3_default(),
            schedule: c.schedule.resolve()?,
            n_samples: c.samples,
            resolution: c.resolution,
            top: c.top,
            seed: c.seed,
        }),
        Command::Serve(_) | Command::Replay(_) => return Ok(None),
    };
    Ok(Some(job))
}

fn dispatch(cli: Cli) -> Result<()> {
    let record = match &cli.command {
        Command::Serve(c) => {
            let config = ServerConfig { data_dir: c.data_dir.clone(), time_compression: c.time_compression };
            let addr = SocketAddr::new(c.bind, c.port);
            let rt = tokio::runtime::Runtime::new().map_err(|source| ServiceError::Io { path: ".".into(), source })?;
            return rt.block_on(serve(config, addr));
        }
        Command::Replay(c) => replay(&c.record, &cli.out)?,
        command => {
            let job = build_job(command)?.expect("workflow commands build a job");
            execute(&job, &cli.out)?
        }
    };
    println!("{}", to_json(&record.summary).trim_end());
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
