// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! REST service behind the calibration console.
//!
//! Sessions live in memory and under `<data_dir>/sessions/<id>/` as plain
//! files: `session.json` (current state), `events.jsonl` (append-only log)
//! and `scans/<scan_id>.txt`. Each session has its own lock, so writes to
//! one session are serialized while other sessions proceed independently.
//! See `docs/api.md` for the endpoint reference.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fluxqa_core::device::{build_device, parse_channel, DeviceConfig, DeviceTruth};
use fluxqa_core::xtalk::{
    calibrate_auto, fit_manual_centers, scan_transmission, simulate_acquisition_time, verify_orthogonality,
    AcquisitionMode, AffineCorrection, Calibration, DetectionParams, Point, ScanGrid2D, ScanRequest,
    DEFAULT_HALF_WIDTH, DEFAULT_POINTS, MIN_AXIS_POINTS,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::RwLock;

use crate::error::{read_file, write_file, Result, ServiceError};
use crate::jobs::{ScanWindow, SOFTWARE, VERSION};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    /// Simulated acquisition time is divided by this before a scan
    /// completes. Infinity completes scans as soon as they are computed.
    pub time_compression: f64,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServerConfig,
    sessions: RwLock<BTreeMap<String, Arc<RwLock<Session>>>>,
    next_id: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanEntry {
    pub scan_id: String,
    pub status: ScanStatus,
    pub request: ScanRequest,
    /// Correction the scan was taken with.
    pub correction: Option<AffineCorrection>,
    pub simulated_time_s: f64,
    pub error: Option<String>,
}

/// Persisted part of a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionRecord {
    id: String,
    device: DeviceConfig,
    revision: u64,
    correction: Option<AffineCorrection>,
    proposed: Option<Calibration>,
    scans: Vec<ScanEntry>,
    n_events: u64,
}

struct Session {
    rec: SessionRecord,
    truth: Arc<DeviceTruth>,
    dir: PathBuf,
    grids: HashMap<String, Arc<ScanGrid2D>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub software: String,
    pub version: String,
    /// Library operation that produced the data.
    pub operation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub device_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scan_id: Option<String>,
}

impl Provenance {
    fn new(operation: &str) -> Self {
        Self {
            software: SOFTWARE.into(),
            version: VERSION.into(),
            operation: operation.into(),
            device_seed: None,
            seed: None,
            scan_id: None,
        }
    }
}

#[derive(Serialize)]
struct Envelope<T> {
    session_id: Option<String>,
    revision: Option<u64>,
    provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<ErrorBody>,
}

#[derive(Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

#[derive(Debug)]
pub struct Failure {
    status: StatusCode,
    code: &'static str,
    message: String,
    session_id: Option<String>,
    revision: Option<u64>,
    operation: &'static str,
}

impl Failure {
    fn new(operation: &'static str, status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), session_id: None, revision: None, operation }
    }

    fn on(mut self, session: &Session) -> Self {
        self.session_id = Some(session.rec.id.clone());
        self.revision = Some(session.rec.revision);
        self
    }

    fn core(operation: &'static str, e: &fluxqa_core::Error) -> Self {
        use fluxqa_core::Error as E;
        let (status, code) = match e {
            E::DegenerateCenters(_) => (StatusCode::UNPROCESSABLE_ENTITY, "degenerate_centers"),
            E::CalibrationInsufficient(_) => (StatusCode::UNPROCESSABLE_ENTITY, "calibration_insufficient"),
            E::AmbiguousBasis(_) => (StatusCode::UNPROCESSABLE_ENTITY, "ambiguous_basis"),
            E::DimensionMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch"),
            E::InvalidParameter(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_parameter"),
            E::UnknownAxis(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_axis"),
            E::FitDiverged(_) => (StatusCode::UNPROCESSABLE_ENTITY, "fit_diverged"),
            E::Parse(_) => (StatusCode::UNPROCESSABLE_ENTITY, "parse_error"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(operation, status, code, e.to_string())
    }

    fn storage(operation: &'static str, e: ServiceError) -> Self {
        Self::new(operation, StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let body: Envelope<()> = Envelope {
            session_id: self.session_id,
            revision: self.revision,
            provenance: Provenance::new(self.operation),
            data: None,
            error: Some(ErrorBody { code: self.code, message: self.message }),
        };
        (self.status, Json(body)).into_response()
    }
}

type Reply = std::result::Result<Response, Failure>;

fn respond<T: Serialize>(status: StatusCode, session: Option<&Session>, provenance: Provenance, data: T) -> Response {
    let body = Envelope {
        session_id: session.map(|s| s.rec.id.clone()),
        revision: session.map(|s| s.rec.revision),
        provenance,
        data: Some(data),
        error: None,
    };
    (status, Json(body)).into_response()
}

/// Empty bodies deserialize as `T::default()`.
fn parse_body<T: DeserializeOwned + Default>(operation: &'static str, body: &Bytes) -> std::result::Result<T, Failure> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| {
        let status = if e.is_data() { StatusCode::UNPROCESSABLE_ENTITY } else { StatusCode::BAD_REQUEST };
        Failure::new(operation, status, "invalid_body", e.to_string())
    })
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl Session {
    fn provenance(&self, operation: &str) -> Provenance {
        Provenance { device_seed: Some(self.rec.device.seed), ..Provenance::new(operation) }
    }

    fn in_flight(&self) -> Option<&ScanEntry> {
        self.rec.scans.iter().find(|s| s.status == ScanStatus::Running)
    }

    fn scan(&self, scan_id: &str) -> Option<&ScanEntry> {
        self.rec.scans.iter().find(|s| s.scan_id == scan_id)
    }

    fn scan_path(&self, scan_id: &str) -> PathBuf {
        self.dir.join("scans").join(format!("{scan_id}.txt"))
    }

    /// Records a state change: bumps the revision, appends to the event log
    /// and rewrites `session.json`.
    fn commit(&mut self, operation: &str, detail: Value) -> Result<()> {
        self.rec.revision += 1;
        self.rec.n_events += 1;
        let event = json!({
            "seq": self.rec.n_events,
            "unix_ms": unix_ms() as u64,
            "revision": self.rec.revision,
            "operation": operation,
            "detail": detail,
        });
        let log = self.dir.join("events.jsonl");
        let io = |source| ServiceError::Io { path: log.clone(), source };
        std::fs::create_dir_all(&self.dir).map_err(io)?;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&log).map_err(io)?;
        writeln!(f, "{event}").map_err(io)?;
        self.persist()
    }

    fn persist(&self) -> Result<()> {
        let tmp = self.dir.join("session.json.tmp");
        write_file(&tmp, serde_json::to_string_pretty(&self.rec).expect("session serializes").as_bytes())?;
        let path = self.dir.join("session.json");
        std::fs::rename(&tmp, &path).map_err(|source| ServiceError::Io { path, source })
    }

    fn grid(&mut self, scan_id: &str) -> Result<Arc<ScanGrid2D>> {
        if let Some(g) = self.grids.get(scan_id) {
            return Ok(g.clone());
        }
        let g = Arc::new(ScanGrid2D::from_text(&read_file(&self.scan_path(scan_id))?)?);
        self.grids.insert(scan_id.to_string(), g.clone());
        Ok(g)
    }

    fn summary(&self) -> Value {
        json!({
            "id": self.rec.id,
            "device": self.rec.device,
            "correction": self.rec.correction,
            "proposed_correction": self.rec.proposed.as_ref().map(|c| &c.correction),
            "scans": self.rec.scans,
            "in_flight_scan": self.in_flight().map(|s| &s.scan_id),
            "n_events": self.rec.n_events,
        })
    }
}

impl AppState {
    /// Opens the data directory and reloads every stored session. Scans
    /// that were running when the service stopped are marked failed.
    pub fn open(config: ServerConfig) -> Result<Self> {
        if !(config.time_compression > 0.0) {
            return Err(ServiceError::invalid("time compression must be > 0"));
        }
        let root = config.data_dir.join("sessions");
        std::fs::create_dir_all(&root).map_err(|source| ServiceError::Io { path: root.clone(), source })?;
        let mut sessions = BTreeMap::new();
        let entries = std::fs::read_dir(&root).map_err(|source| ServiceError::Io { path: root.clone(), source })?;
        for entry in entries.flatten() {
            let dir = entry.path();
            let file = dir.join("session.json");
            if !file.is_file() {
                continue;
            }
            let mut rec: SessionRecord = serde_json::from_str(&read_file(&file)?)
                .map_err(|e| ServiceError::invalid(format!("{}: {e}", file.display())))?;
            for s in rec.scans.iter_mut().filter(|s| s.status == ScanStatus::Running) {
                s.status = ScanStatus::Failed;
                s.error = Some("interrupted by service restart".into());
            }
            let truth = Arc::new(build_device(&rec.device)?);
            let session = Session { rec, truth, dir, grids: HashMap::new() };
            session.persist()?;
            sessions.insert(session.rec.id.clone(), Arc::new(RwLock::new(session)));
        }
        Ok(Self {
            inner: Arc::new(Inner { config, sessions: RwLock::new(sessions), next_id: AtomicU64::new(0) }),
        })
    }

    async fn session(&self, operation: &'static str, id: &str) -> std::result::Result<Arc<RwLock<Session>>, Failure> {
        self.inner.sessions.read().await.get(id).cloned().ok_or_else(|| Failure {
            session_id: Some(id.to_string()),
            ..Failure::new(operation, StatusCode::NOT_FOUND, "unknown_session", format!("no session `{id}`"))
        })
    }

    fn scan_delay(&self, simulated_s: f64) -> Duration {
        let k = self.inner.config.time_compression;
        if k.is_finite() {
            Duration::from_secs_f64((simulated_s / k).max(0.0))
        } else {
            Duration::ZERO
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/scans", post(start_scan).get(list_scans))
        .route("/sessions/{id}/scans/{scan_id}", get(scan_status))
        .route("/sessions/{id}/scans/{scan_id}/data", get(scan_data))
        .route("/sessions/{id}/centers", post(submit_centers))
        .route("/sessions/{id}/fit", post(auto_fit))
        .route("/sessions/{id}/correction", get(get_correction).put(apply_correction).delete(clear_correction))
        .route("/sessions/{id}/verification", get(verification))
        .route("/sessions/{id}/events", get(events))
        .fallback(|| async {
            Failure::new("route", StatusCode::NOT_FOUND, "not_found", "no such endpoint").into_response()
        })
        .with_state(state)
}

pub async fn serve(config: ServerConfig, addr: SocketAddr) -> Result<()> {
    let state = AppState::open(config)?;
    let io = |source| ServiceError::Io { path: PathBuf::from(addr.to_string()), source };
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(io)?;
    eprintln!("fluxqa listening on http://{}", listener.local_addr().map_err(io)?);
    axum::serve(listener, router(state)).await.map_err(io)
}

async fn health() -> Response {
    respond(StatusCode::OK, None, Provenance::new("health"), json!({ "status": "ok" }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    device: Option<DeviceConfig>,
    qubits: Option<usize>,
    crosstalk: Option<f64>,
    device_seed: Option<u64>,
    offsets: Option<bool>,
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> Reply {
    const OP: &str = "device::build_device";
    let req: CreateSession = parse_body(OP, &body)?;
    let device = match req.device {
        Some(d) => d,
        None => {
            let mut d = DeviceConfig::with_qubits(
                req.qubits.unwrap_or(1),
                req.crosstalk.unwrap_or(0.3),
                req.device_seed.unwrap_or(0),
            );
            d.offsets_enabled = req.offsets.unwrap_or(true);
            d
        }
    };
    let truth = Arc::new(build_device(&device).map_err(|e| Failure::core(OP, &e))?);
    let mut sessions = st.inner.sessions.write().await;
    let id = loop {
        let n = st.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let id = format!("s{:x}{:04x}", unix_ms(), n & 0xffff);
        if !sessions.contains_key(&id) {
            break id;
        }
    };
    let dir = st.inner.config.data_dir.join("sessions").join(&id);
    let rec =
        SessionRecord { id: id.clone(), device, revision: 0, correction: None, proposed: None, scans: vec![], n_events: 0 };
    let mut session = Session { rec, truth, dir, grids: HashMap::new() };
    session.commit("create_session", json!({})).map_err(|e| Failure::storage(OP, e))?;
    let resp = respond(StatusCode::CREATED, Some(&session), session.provenance(OP), session.summary());
    sessions.insert(id, Arc::new(RwLock::new(session)));
    Ok(resp)
}

async fn list_sessions(State(st): State<AppState>) -> Response {
    let sessions: Vec<Arc<RwLock<Session>>> = st.inner.sessions.read().await.values().cloned().collect();
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        let s = s.read().await;
        out.push(json!({ "id": s.rec.id, "revision": s.rec.revision, "device_seed": s.rec.device.seed }));
    }
    respond(StatusCode::OK, None, Provenance::new("list_sessions"), out)
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Reply {
    let sess = st.session("get_session", &id).await?;
    let s = sess.read().await;
    Ok(respond(StatusCode::OK, Some(&s), s.provenance("get_session"), s.summary()))
}

/// Window, acquisition and seed of a scan or verification rescan.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct WindowBody {
    qubit: usize,
    axes: Option<[String; 2]>,
    n_points: usize,
    half_width: f64,
    mode: AcquisitionMode,
    noise_sigma: Option<f64>,
    probe_ghz: Option<f64>,
    seed: u64,
    /// Scan in the coordinates of the applied correction.
    corrected: bool,
}

impl Default for WindowBody {
    fn default() -> Self {
        Self {
            qubit: 0,
            axes: None,
            n_points: DEFAULT_POINTS,
            half_width: DEFAULT_HALF_WIDTH,
            mode: AcquisitionMode::Sawtooth,
            noise_sigma: None,
            probe_ghz: None,
            seed: 0,
            corrected: false,
        }
    }
}

impl WindowBody {
    fn window(&self) -> ScanWindow {
        ScanWindow {
            axes: self.axes.clone().unwrap_or_else(|| ScanWindow::for_qubit(self.qubit).axes),
            n_points: self.n_points,
            half_width: self.half_width,
            mode: self.mode,
            noise_sigma: self.noise_sigma,
            probe_ghz: self.probe_ghz,
        }
    }
}

fn check_window(op: &'static str, w: &ScanWindow, truth: &DeviceTruth) -> std::result::Result<(), Failure> {
    let unprocessable = |code, msg: String| Failure::new(op, StatusCode::UNPROCESSABLE_ENTITY, code, msg);
    for label in &w.axes {
        if !parse_channel(label).is_some_and(|j| j < truth.n_lines()) {
            return Err(unprocessable("unknown_axis", format!("unknown axis label `{label}`")));
        }
    }
    if w.axes[0] == w.axes[1] {
        return Err(unprocessable("invalid_parameter", "scan axes must be two different lines".into()));
    }
    if w.n_points < MIN_AXIS_POINTS {
        return Err(unprocessable("invalid_parameter", format!("n_points must be at least {MIN_AXIS_POINTS}")));
    }
    if !(w.half_width > 0.0 && w.half_width.is_finite()) {
        return Err(unprocessable("invalid_parameter", "half_width must be finite and > 0".into()));
    }
    Ok(())
}

async fn start_scan(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> Reply {
    const OP: &str = "xtalk::scan_transmission";
    let sess = st.session(OP, &id).await?;
    let mut s = sess.write().await;
    let body: WindowBody = parse_body(OP, &body).map_err(|f| f.on(&s))?;
    if let Some(running) = s.in_flight() {
        let msg = format!("scan `{}` is still running", running.scan_id);
        return Err(Failure::new(OP, StatusCode::CONFLICT, "scan_in_progress", msg).on(&s));
    }
    let correction = if body.corrected {
        let c = s.rec.correction.clone().ok_or_else(|| {
            Failure::new(OP, StatusCode::CONFLICT, "no_correction", "no correction is applied").on(&s)
        })?;
        Some(c)
    } else {
        None
    };
    let mut window = body.window();
    if let Some(c) = &correction {
        window.axes = c.axes.clone();
    }
    check_window(OP, &window, &s.truth).map_err(|f| f.on(&s))?;
    let request = window.request(body.seed);
    let acq = simulate_acquisition_time(window.n_points, window.n_points, &request.acquisition)
        .map_err(|e| Failure::core(OP, &e).on(&s))?;

    let scan_id = format!("scan-{:04}", s.rec.scans.len() + 1);
    s.rec.scans.push(ScanEntry {
        scan_id: scan_id.clone(),
        status: ScanStatus::Running,
        request: request.clone(),
        correction: correction.clone(),
        simulated_time_s: acq.total_time_s,
        error: None,
    });
    s.commit("scan_started", json!({ "scan_id": scan_id, "seed": body.seed }))
        .map_err(|e| Failure::storage(OP, e).on(&s))?;

    let delay = st.scan_delay(acq.total_time_s);
    let truth = s.truth.clone();
    let task_sess = sess.clone();
    let task_id = scan_id.clone();
    tokio::spawn(async move {
        let computed =
            tokio::task::spawn_blocking(move || scan_transmission(&truth, &request, correction.as_ref())).await;
        tokio::time::sleep(delay).await;
        let mut s = task_sess.write().await;
        let outcome = match computed {
            Ok(Ok(grid)) => {
                let path = s.scan_path(&task_id);
                write_file(&path, grid.to_text().as_bytes()).map(|_| grid).map_err(|e| e.to_string())
            }
            Ok(Err(e)) => Err(e.to_string()),
            Err(e) => Err(format!("scan task failed: {e}")),
        };
        let (status, error, op) = match outcome {
            Ok(grid) => {
                s.grids.insert(task_id.clone(), Arc::new(grid));
                (ScanStatus::Complete, None, "scan_completed")
            }
            Err(msg) => (ScanStatus::Failed, Some(msg), "scan_failed"),
        };
        if let Some(entry) = s.rec.scans.iter_mut().find(|e| e.scan_id == task_id) {
            entry.status = status;
            entry.error = error;
        }
        if let Err(e) = s.commit(op, json!({ "scan_id": task_id })) {
            eprintln!("fluxqa: could not record scan completion: {e}");
        }
    });

    let prov = Provenance { seed: Some(body.seed), scan_id: Some(scan_id.clone()), ..s.provenance(OP) };
    let data = json!({
        "scan_id": scan_id,
        "status": ScanStatus::Running,
        "simulated_time_s": acq.total_time_s,
        "expected_wait_s": delay.as_secs_f64(),
        "poll": format!("/sessions/{id}/scans/{scan_id}"),
    });
    Ok(respond(StatusCode::ACCEPTED, Some(&s), prov, data))
}

async fn list_scans(State(st): State<AppState>, Path(id): Path<String>) -> Reply {
    let sess = st.session("list_scans", &id).await?;
    let s = sess.read().await;
    Ok(respond(StatusCode::OK, Some(&s), s.provenance("list_scans"), &s.rec.scans))
}

fn unknown_scan(op: &'static str, s: &Session, scan_id: &str) -> Failure {
    Failure::new(op, StatusCode::NOT_FOUND, "unknown_scan", format!("no scan `{scan_id}`")).on(s)
}

async fn scan_status(State(st): State<AppState>, Path((id, scan_id)): Path<(String, String)>) -> Reply {
    const OP: &str = "scan_status";
    let sess = st.session(OP, &id).await?;
    let s = sess.read().await;
    let entry = s.scan(&scan_id).ok_or_else(|| unknown_scan(OP, &s, &scan_id))?;
    let prov = Provenance { seed: Some(entry.request.seed), scan_id: Some(scan_id.clone()), ..s.provenance(OP) };
    Ok(respond(StatusCode::OK, Some(&s), prov, entry))
}

/// Loads a completed scan, or fails with 404 or 409.
fn completed_grid(
    op: &'static str,
    s: &mut Session,
    scan_id: &str,
) -> std::result::Result<(ScanEntry, Arc<ScanGrid2D>), Failure> {
    let entry = s.scan(scan_id).cloned().ok_or_else(|| unknown_scan(op, s, scan_id))?;
    if entry.status != ScanStatus::Complete {
        let msg = format!("scan `{scan_id}` is {:?}", entry.status).to_lowercase();
        return Err(Failure::new(op, StatusCode::CONFLICT, "scan_not_ready", msg).on(s));
    }
    let grid = s.grid(scan_id).map_err(|e| Failure::storage(op, e).on(s))?;
    Ok((entry, grid))
}

async fn scan_data(State(st): State<AppState>, Path((id, scan_id)): Path<(String, String)>) -> Reply {
    const OP: &str = "xtalk::scan_transmission";
    let sess = st.session(OP, &id).await?;
    let mut s = sess.write().await;
    let (entry, grid) = completed_grid(OP, &mut s, &scan_id)?;
    let prov = Provenance { seed: Some(entry.request.seed), scan_id: Some(scan_id), ..s.provenance(OP) };
    Ok(respond(StatusCode::OK, Some(&s), prov, &*grid))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CentersBody {
    centers: Vec<Point>,
    indices: Option<Vec<[i64; 2]>>,
    /// Scan the centers were picked on; sets the axes and bounds.
    scan_id: Option<String>,
    axes: Option<[String; 2]>,
}

/// Stores a calibration as the proposed correction and builds the reply.
/// On a corrected scan the fitted correction is relative to the scan's
/// correction and is composed with it.
fn propose(
    op: &'static str,
    s: &mut Session,
    mut cal: Calibration,
    scan: Option<&ScanEntry>,
) -> std::result::Result<Value, Failure> {
    if let Some(outer) = scan.and_then(|e| e.correction.as_ref()) {
        cal.correction = outer.compose(&cal.correction).map_err(|e| Failure::core(op, &e).on(s))?;
    }
    let data = json!({
        "fit": cal.fit,
        "correction": cal.correction,
        "indexed": cal.indexed,
        "rejected": cal.rejected,
        "composed_with_scan_correction": scan.is_some_and(|e| e.correction.is_some()),
    });
    s.rec.proposed = Some(cal);
    s.commit(op, json!({ "scan_id": scan.map(|e| &e.scan_id) })).map_err(|e| Failure::storage(op, e).on(s))?;
    Ok(data)
}

async fn submit_centers(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> Reply {
    const OP: &str = "xtalk::fit_manual_centers";
    let sess = st.session(OP, &id).await?;
    let mut s = sess.write().await;
    let body: CentersBody = parse_body(OP, &body).map_err(|f| f.on(&s))?;
    if body.centers.len() < 3 {
        let msg = format!("need at least 3 centers, got {}", body.centers.len());
        return Err(Failure::new(OP, StatusCode::UNPROCESSABLE_ENTITY, "insufficient_centers", msg).on(&s));
    }
    let scan = match &body.scan_id {
        Some(scan_id) => Some(completed_grid(OP, &mut s, scan_id)?),
        None => None,
    };
    let axes = match (&scan, &body.axes) {
        (Some((_, g)), _) => [g.axis_x.label.clone(), g.axis_y.label.clone()],
        (None, Some(a)) => a.clone(),
        (None, None) => ScanWindow::for_qubit(0).axes,
    };
    if let Some((_, g)) = &scan {
        let inside = |p: &Point| {
            p[0] >= g.axis_x.start && p[0] <= g.axis_x.stop && p[1] >= g.axis_y.start && p[1] <= g.axis_y.stop
        };
        if let Some(p) = body.centers.iter().find(|p| !inside(p)) {
            let msg = format!("center ({}, {}) lies outside the scan", p[0], p[1]);
            return Err(Failure::new(OP, StatusCode::UNPROCESSABLE_ENTITY, "center_outside_scan", msg).on(&s));
        }
    }
    let cal = fit_manual_centers(&body.centers, body.indices.as_deref(), axes).map_err(|e| Failure::core(OP, &e).on(&s))?;
    let entry = scan.map(|(e, _)| e);
    let data = propose(OP, &mut s, cal, entry.as_ref())?;
    let prov = Provenance { scan_id: body.scan_id, ..s.provenance(OP) };
    Ok(respond(StatusCode::OK, Some(&s), prov, data))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitBody {
    scan_id: String,
    detection: Option<DetectionParams>,
}

async fn auto_fit(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> Reply {
    const OP: &str = "xtalk::calibrate_auto";
    let sess = st.session(OP, &id).await?;
    let mut s = sess.write().await;
    let body: FitBody = parse_body(OP, &body).map_err(|f| f.on(&s))?;
    let (entry, grid) = completed_grid(OP, &mut s, &body.scan_id)?;
    let params = body.detection.unwrap_or_default();
    let cal = tokio::task::spawn_blocking(move || calibrate_auto(&grid, &params))
        .await
        .map_err(|e| Failure::new(OP, StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).on(&s))?
        .map_err(|e| Failure::core(OP, &e).on(&s))?;
    let data = propose(OP, &mut s, cal, Some(&entry))?;
    let prov = Provenance { seed: Some(entry.request.seed), scan_id: Some(body.scan_id), ..s.provenance(OP) };
    Ok(respond(StatusCode::OK, Some(&s), prov, data))
}

async fn get_correction(State(st): State<AppState>, Path(id): Path<String>) -> Reply {
    let sess = st.session("get_correction", &id).await?;
    let s = sess.read().await;
    let data = json!({
        "correction": s.rec.correction,
        "proposed": s.rec.proposed.as_ref().map(|c| &c.correction),
    });
    Ok(respond(StatusCode::OK, Some(&s), s.provenance("get_correction"), data))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApplyBody {
    /// Applies the proposed correction when absent.
    correction: Option<AffineCorrection>,
}

async fn apply_correction(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> Reply {
    const OP: &str = "apply_correction";
    let sess = st.session(OP, &id).await?;
    let mut s = sess.write().await;
    let body: ApplyBody = parse_body(OP, &body).map_err(|f| f.on(&s))?;
    let correction = match body.correction {
        Some(c) => c,
        None => s.rec.proposed.as_ref().map(|c| c.correction.clone()).ok_or_else(|| {
            Failure::new(OP, StatusCode::CONFLICT, "no_proposed_correction", "fit a correction first").on(&s)
        })?,
    };
    correction.validate().map_err(|e| Failure::core(OP, &e).on(&s))?;
    let window = ScanWindow { axes: correction.axes.clone(), ..ScanWindow::for_qubit(0) };
    check_window(OP, &window, &s.truth).map_err(|f| f.on(&s))?;
    s.rec.correction = Some(correction.clone());
    s.commit(OP, json!({ "axes": correction.axes })).map_err(|e| Failure::storage(OP, e).on(&s))?;
    Ok(respond(StatusCode::OK, Some(&s), s.provenance(OP), json!({ "correction": correction })))
}

async fn clear_correction(State(st): State<AppState>, Path(id): Path<String>) -> Reply {
    const OP: &str = "clear_correction";
    let sess = st.session(OP, &id).await?;
    let mut s = sess.write().await;
    if s.rec.correction.take().is_some() {
        s.commit(OP, json!({})).map_err(|e| Failure::storage(OP, e).on(&s))?;
    }
    Ok(respond(StatusCode::OK, Some(&s), s.provenance(OP), json!({ "correction": null })))
}

async fn verification(
    State(st): State<AppState>,
    Path(id): Path<String>,
    query: std::result::Result<Query<WindowBody>, QueryRejection>,
) -> Reply {
    const OP: &str = "xtalk::verify_orthogonality";
    let sess = st.session(OP, &id).await?;
    let (truth, correction, window, seed, prov) = {
        let s = sess.read().await;
        let Query(q) = query
            .map_err(|e| Failure::new(OP, StatusCode::UNPROCESSABLE_ENTITY, "invalid_query", e.body_text()).on(&s))?;
        let correction = s.rec.correction.clone().ok_or_else(|| {
            Failure::new(OP, StatusCode::CONFLICT, "no_correction", "no correction is applied").on(&s)
        })?;
        let window = ScanWindow { axes: correction.axes.clone(), ..q.window() };
        check_window(OP, &window, &s.truth).map_err(|f| f.on(&s))?;
        (s.truth.clone(), correction, window, q.seed, Provenance { seed: Some(q.seed), ..s.provenance(OP) })
    };
    let req = window.verification_request(&correction, seed);
    let report = tokio::task::spawn_blocking(move || {
        verify_orthogonality(&truth, &correction, &req, &DetectionParams::default())
    })
    .await
    .map_err(|e| Failure::new(OP, StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let s = sess.read().await;
    let report = report.map_err(|e| Failure::core(OP, &e).on(&s))?;
    Ok(respond(StatusCode::OK, Some(&s), prov, report))
}

async fn events(State(st): State<AppState>, Path(id): Path<String>) -> Reply {
    const OP: &str = "events";
    let sess = st.session(OP, &id).await?;
    let s = sess.read().await;
    let text = read_file(&s.dir.join("events.jsonl")).map_err(|e| Failure::storage(OP, e).on(&s))?;
    let events: Vec<Value> = text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    Ok(respond(StatusCode::OK, Some(&s), s.provenance(OP), events))
}

