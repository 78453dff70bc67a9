//! HTTP inference service and the single-thread decode benchmark.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::manip::{self, GaussianModel};
use crate::mesh::Mesh;
use crate::model::{Backbone, LammModel};

pub const DEFAULT_UNDO: usize = 64;

/// Sampling distributions fitted on training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Priors {
    pub latent: GaussianModel,
    pub regions: Vec<GaussianModel>,
}

#[derive(Debug, Clone)]
struct Snapshot {
    z: Vec<f32>,
    deltas: Vec<Vec<f32>>,
}

#[derive(Debug)]
pub struct Session {
    pub id: u64,
    pub revision: u64,
    state: Snapshot,
    undo: VecDeque<Snapshot>,
    undo_limit: usize,
}

impl Session {
    fn push(&mut self, next: Snapshot) {
        if self.undo.len() == self.undo_limit {
            self.undo.pop_front();
        }
        self.undo.push_back(std::mem::replace(&mut self.state, next));
        self.revision += 1;
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }
}

pub struct AppState {
    model: Arc<LammModel>,
    priors: Option<Priors>,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
    undo_limit: usize,
}

impl AppState {
    pub fn new(model: LammModel, priors: Option<Priors>) -> Self {
        Self::with_undo_limit(model, priors, DEFAULT_UNDO)
    }

    pub fn with_undo_limit(model: LammModel, priors: Option<Priors>, undo_limit: usize) -> Self {
        Self {
            model: Arc::new(model),
            priors,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            undo_limit: undo_limit.max(1),
        }
    }

    fn session(&self, id: u64) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }

    fn decode(&self, s: &Snapshot) -> Result<Vec<f32>, ApiError> {
        let out = self.model.decode(&s.z, Some(&s.deltas))?;
        Ok(self.model.template().uncenter(&out).flat())
    }

    fn encode_mesh(&self, m: &MeshPayload) -> Result<Vec<f32>, ApiError> {
        let centered = self.centered(m)?;
        Ok(self.model.encode_latent(&centered)?)
    }

    fn centered(&self, m: &MeshPayload) -> Result<Vec<f32>, ApiError> {
        let t = self.model.template();
        if m.num_vertices != t.num_vertices() || m.vertices.len() != 3 * m.num_vertices {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!(
                    "mesh with {} vertices ({} floats) does not match the {}-vertex template",
                    m.num_vertices,
                    m.vertices.len(),
                    t.num_vertices()
                ),
            ));
        }
        Ok(t.center(&Mesh::from_flat(&m.vertices, t.faces().clone()))?)
    }

    fn respond(&self, s: &Session) -> Result<Json<SessionView>, ApiError> {
        Ok(Json(SessionView {
            session: s.id,
            revision: s.revision,
            num_vertices: self.model.template().num_vertices(),
            vertices: self.decode(&s.state)?,
        }))
    }

    fn priors(&self) -> Result<&Priors, ApiError> {
        self.priors.as_ref().ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no sampling distributions were loaded")
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::TemplateMismatch { .. } | Error::ShapeMismatch { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshPayload {
    pub num_vertices: usize,
    pub vertices: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session: u64,
    pub revision: u64,
    pub num_vertices: usize,
    pub vertices: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TemplateView {
    pub num_vertices: usize,
    pub faces: Vec<Vec<u32>>,
    pub region_of: Vec<u32>,
    pub region_names: Vec<String>,
    pub controls: Vec<Vec<u32>>,
    /// Mean shape, flat.
    pub vertices: Vec<f32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    mesh: Option<MeshPayload>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditRequest {
    displacements: BTreeMap<String, [f32; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "kind")]
enum SampleRequest {
    Identity {
        session: Option<u64>,
        #[serde(default)]
        seed: u64,
    },
    Region {
        session: u64,
        region: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SwapRequest {
    session: Option<u64>,
    recipient: Option<MeshPayload>,
    donor: MeshPayload,
    region: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/template", get(template))
        .route("/session", post(create_session))
        .route("/session/{id}/encode", post(encode))
        .route("/session/{id}/edit", post(edit))
        .route("/session/{id}/undo", post(undo))
        .route("/sample", post(sample))
        .route("/swap", post(swap))
        .with_state(state)
}

async fn template(State(app): State<Arc<AppState>>) -> Json<TemplateView> {
    let t = app.model.template();
    Json(TemplateView {
        num_vertices: t.num_vertices(),
        faces: t.faces().iter().cloned().collect(),
        region_of: t.region_of().to_vec(),
        region_names: t.region_names().to_vec(),
        controls: t.control_sets().to_vec(),
        vertices: t.mean_mesh().flat(),
    })
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let req: NewSession = parse(&body)?;
    let z = match &req.mesh {
        Some(m) => app.encode_mesh(m)?,
        None => app.model.encode_latent(&vec![0.0; 3 * app.model.template().num_vertices()])?,
    };
    let id = app.next_id.fetch_add(1, Ordering::Relaxed);
    let session = Session {
        id,
        revision: 0,
        state: Snapshot {
            z,
            deltas: app.model.zero_deltas(1),
        },
        undo: VecDeque::new(),
        undo_limit: app.undo_limit,
    };
    let view = app.respond(&session)?;
    app.sessions
        .lock()
        .expect("session map poisoned")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok(view)
}

async fn encode(State(app): State<Arc<AppState>>, Path(id): Path<u64>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let mesh: MeshPayload = parse(&body)?;
    let handle = app.session(id)?;
    let z = app.encode_mesh(&mesh)?;
    let mut s = handle.lock().expect("session poisoned");
    s.push(Snapshot {
        z,
        deltas: app.model.zero_deltas(1),
    });
    app.respond(&s)
}

async fn edit(State(app): State<Arc<AppState>>, Path(id): Path<u64>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let req: EditRequest = parse(&body)?;
    let handle = app.session(id)?;
    let t = app.model.template();
    let mut updates = Vec::with_capacity(req.displacements.len());
    for (key, d) in &req.displacements {
        let v: u32 = key
            .parse()
            .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("vertex index {key:?} is not an integer")))?;
        let (region, slot) = t
            .control_slot(v)
            .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, format!("vertex {v} is not a control point")))?;
        if d.iter().any(|x| !x.is_finite()) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("displacement of vertex {v} is not finite")));
        }
        updates.push((region, slot, *d));
    }
    let mut s = handle.lock().expect("session poisoned");
    let mut next = s.state.clone();
    for (region, slot, d) in updates {
        for k in 0..3 {
            next.deltas[region][3 * slot + k] += d[k];
        }
    }
    s.push(next);
    app.respond(&s)
}

async fn undo(State(app): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Json<SessionView>, ApiError> {
    let handle = app.session(id)?;
    let mut s = handle.lock().expect("session poisoned");
    let prev = s
        .undo
        .pop_back()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "nothing to undo"))?;
    s.state = prev;
    s.revision += 1;
    app.respond(&s)
}

async fn sample(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let req: SampleRequest = parse(&body)?;
    let priors = app.priors()?;
    match req {
        SampleRequest::Identity { session, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = priors.latent.sample_f32(&mut rng);
            let next = Snapshot {
                z,
                deltas: app.model.zero_deltas(1),
            };
            match session {
                Some(id) => {
                    let handle = app.session(id)?;
                    let mut s = handle.lock().expect("session poisoned");
                    s.push(next);
                    app.respond(&s)
                }
                None => Ok(Json(SessionView {
                    session: 0,
                    revision: 0,
                    num_vertices: app.model.template().num_vertices(),
                    vertices: app.decode(&next)?,
                })),
            }
        }
        SampleRequest::Region { session, region, seed } => {
            let g = priors
                .regions
                .get(region)
                .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, format!("region {region} out of range")))?;
            let handle = app.session(session)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = handle.lock().expect("session poisoned");
            let mut next = s.state.clone();
            next.deltas[region] = g.sample_f32(&mut rng);
            s.push(next);
            app.respond(&s)
        }
    }
}

async fn swap(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let req: SwapRequest = parse(&body)?;
    let t = app.model.template();
    if req.region >= t.num_regions() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("region {} out of range", req.region)));
    }
    let donor = app.centered(&req.donor)?;
    let swapped = |recipient: &[f32]| -> Result<Snapshot, ApiError> {
        let delta = manip::aligned_control_displacement(t, recipient, &donor, req.region)?;
        Ok(Snapshot {
            z: app.model.encode_latent(recipient)?,
            deltas: manip::single_region_deltas(t, req.region, &delta)?,
        })
    };
    match (req.session, &req.recipient) {
        (Some(id), None) => {
            let handle = app.session(id)?;
            let mut s = handle.lock().expect("session poisoned");
            let current = app.model.decode(&s.state.z, Some(&s.state.deltas))?;
            let next = swapped(&current)?;
            s.push(next);
            app.respond(&s)
        }
        (None, Some(m)) => {
            let next = swapped(&app.centered(m)?)?;
            Ok(Json(SessionView {
                session: 0,
                revision: 0,
                num_vertices: t.num_vertices(),
                vertices: app.decode(&next)?,
            }))
        }
        _ => Err(ApiError::new(StatusCode::BAD_REQUEST, "give exactly one of session and recipient")),
    }
}

/// Bind `addr` and serve until the process is interrupted.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub vertices: usize,
    pub backbone: Backbone,
    pub dim: usize,
    pub layers: [usize; 2],
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub threads: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub hardware: String,
}

pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpu} ({}-{})", std::env::consts::ARCH, std::env::consts::OS)
}

/// Time single-sample decodes with a fixed nonzero displacement at every control.
pub fn bench(model: &LammModel, warmup: usize, iterations: usize) -> crate::error::Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::invalid("bench needs at least one timed iteration"));
    }
    let t = model.template();
    let z = model.encode_latent(&vec![0.0; 3 * t.num_vertices()])?;
    let deltas: Vec<Vec<f32>> = model
        .zero_deltas(1)
        .into_iter()
        .map(|d| (0..d.len()).map(|k| 0.01 * ((k % 3) as f32 - 1.0 + 0.5)).collect())
        .collect();
    for _ in 0..warmup {
        std::hint::black_box(model.decode(&z, Some(&deltas))?);
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        std::hint::black_box(model.decode(std::hint::black_box(&z), Some(&deltas))?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let q = |p: f64| times[((p * (times.len() - 1) as f64).round() as usize).min(times.len() - 1)];
    let c = model.config();
    Ok(BenchReport {
        vertices: t.num_vertices(),
        backbone: c.backbone,
        dim: c.dim,
        layers: [c.encoder_layers, c.decoder_layers],
        mean_ms: mean,
        median_ms: q(0.5),
        p99_ms: q(0.99),
        threads: 1,
        iterations,
        warmup,
        hardware: hardware_descriptor(),
    })
}
