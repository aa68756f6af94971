//! HTTP API over shared, read-only weights and a dataset directory.

use std::collections::HashMap;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use keymorph_core::detector::{DetectorWeights, KeypointDetector};
use keymorph_core::eval::{dice, lambda_sweep, DiceScores};
use keymorph_core::io::{encode_kmt, encode_png_gray, DType};
use keymorph_core::registration::{register_keypoints, RegistrationResult};
use keymorph_core::synthdata::{list_subjects, load_subject, SyntheticSubject};
use keymorph_core::transforms::{KeypointSet, TransformKind, TransformParams};
use keymorph_core::warp::Image;
use keymorph_core::Error;

use crate::{display_slice, load_weights, CliError, CliResult, ServeArgs};

/// Shared state of the service. Weights are never mutated after start-up.
pub struct AppState {
    weights: DetectorWeights,
    fingerprint: String,
    dataset: PathBuf,
    subject_ids: Vec<String>,
    subjects: RwLock<HashMap<String, Arc<SyntheticSubject>>>,
    keypoints: Mutex<HashMap<(String, usize), KeypointSet>>,
}

impl AppState {
    pub fn new(weights: DetectorWeights, dataset: impl Into<PathBuf>) -> keymorph_core::Result<Self> {
        let dataset = dataset.into();
        let subject_ids = list_subjects(&dataset)?;
        Ok(Self {
            fingerprint: weights.fingerprint(),
            weights,
            dataset,
            subject_ids,
            subjects: RwLock::new(HashMap::new()),
            keypoints: Mutex::new(HashMap::new()),
        })
    }

    fn subject(&self, id: &str) -> Result<Arc<SyntheticSubject>, ApiError> {
        if !self.subject_ids.iter().any(|s| s == id) {
            return Err(ApiError::not_found(format!("unknown subject {id:?}")));
        }
        if let Some(s) = self.subjects.read().expect("subject cache").get(id) {
            return Ok(s.clone());
        }
        let s = Arc::new(load_subject(&self.dataset, id)?);
        self.subjects.write().expect("subject cache").insert(id.to_string(), s.clone());
        Ok(s)
    }

    fn image(&self, id: &str, modality: usize) -> Result<(Arc<SyntheticSubject>, Image), ApiError> {
        let s = self.subject(id)?;
        let img = s
            .modalities
            .get(modality)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("subject {id} has no modality {modality}")))?;
        Ok((s, img))
    }

    /// Cached keypoints of one render.
    fn keypoints(&self, id: &str, modality: usize) -> Result<KeypointSet, ApiError> {
        let key = (id.to_string(), modality);
        if let Some(k) = self.keypoints.lock().expect("keypoint cache").get(&key) {
            return Ok(k.clone());
        }
        let (_, img) = self.image(id, modality)?;
        let k = self.weights.detect(&img)?;
        self.keypoints.lock().expect("keypoint cache").insert(key, k.clone());
        Ok(k)
    }
}

/// Detector that answers from the service's keypoint cache.
struct CachedDetector<'a> {
    state: &'a AppState,
    entries: Vec<(String, usize)>,
}

impl KeypointDetector for CachedDetector<'_> {
    fn detect_keypoints(&self, img: &Image) -> keymorph_core::Result<KeypointSet> {
        for (id, m) in &self.entries {
            if let Ok((_, cached)) = self.state.image(id, *m) {
                if &cached == img {
                    return self.state.keypoints(id, *m).map_err(|e| Error::InvalidArgument(e.message));
                }
            }
        }
        self.state.weights.detect(img)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(m: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, message: m.into() }
    }

    fn not_found(m: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, message: m.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match &e {
            Error::DegenerateConfiguration(_) | Error::SingularMatrix { .. } | Error::DuplicatePoints(..) => {
                Self { status: StatusCode::UNPROCESSABLE_ENTITY, message: e.to_string() }
            }
            Error::ShapeMismatch(_) | Error::InvalidArgument(_) => Self::bad_request(e.to_string()),
            _ => {
                eprintln!("internal error: {e}");
                Self { status: StatusCode::INTERNAL_SERVER_ERROR, message: "internal error".into() }
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn json_response<T: Serialize>(v: &T) -> Response {
    match serde_json::to_string(v) {
        Ok(s) => ([(header::CONTENT_TYPE, "application/json")], s).into_response(),
        Err(e) => ApiError::from(Error::from(e)).into_response(),
    }
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|_| ApiError::from(Error::InvalidArgument("worker panicked".into())))?
}

async fn health(State(s): State<Arc<AppState>>) -> Response {
    json_response(&serde_json::json!({ "status": "ok", "model": s.fingerprint }))
}

async fn subjects(State(s): State<Arc<AppState>>) -> ApiResult<Response> {
    let st = s.clone();
    let modalities = match s.subject_ids.first().cloned() {
        Some(id) => blocking(move || Ok(st.subject(&id)?.modalities.len())).await?,
        None => 0,
    };
    Ok(json_response(&serde_json::json!({ "subjects": s.subject_ids, "modalities": modalities })))
}

/// `modality` is an index or `labels`.
async fn image(State(s): State<Arc<AppState>>, Path((subject, modality)): Path<(String, String)>) -> ApiResult<Response> {
    blocking(move || {
        let t = if modality == "labels" {
            let subj = s.subject(&subject)?;
            let scale = 1.0 / (subj.labels.num_labels().max(2) - 1) as f64;
            subj.labels.tensor().scale(scale)
        } else {
            let m: usize = modality.parse().map_err(|_| ApiError::bad_request(format!("bad modality {modality:?}")))?;
            s.image(&subject, m)?.1.first_channel()
        };
        Ok(png_response(encode_png_gray(&display_slice(&t))?))
    })
    .await
}

async fn keypoints(State(s): State<Arc<AppState>>, Path((subject, modality)): Path<(String, usize)>) -> ApiResult<Response> {
    blocking(move || {
        let k = s.keypoints(&subject, modality)?;
        Ok(json_response(&serde_json::json!({ "subject": subject, "modality": modality, "keypoints": k })))
    })
    .await
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterRequest {
    pub moving: String,
    pub fixed: String,
    #[serde(default)]
    pub modality_m: usize,
    #[serde(default)]
    pub modality_f: usize,
    #[serde(default = "default_transform")]
    pub transform: String,
    #[serde(default)]
    pub lambda: f64,
}

fn default_transform() -> String {
    "affine".into()
}

fn parse_kind(transform: &str, lambda: f64) -> ApiResult<TransformKind> {
    if !(lambda >= 0.0) {
        return Err(ApiError::bad_request(format!("lambda must be ≥ 0, got {lambda}")));
    }
    match transform {
        "affine" => Ok(TransformKind::Affine),
        "tps" => Ok(TransformKind::Tps { lambda }),
        t => Err(ApiError::bad_request(format!("unknown transform {t:?}"))),
    }
}

#[derive(Serialize)]
struct RegisterResponse<'a> {
    moving: &'a str,
    fixed: &'a str,
    transform: &'a TransformParams,
    moving_keypoints: &'a KeypointSet,
    fixed_keypoints: &'a KeypointSet,
    lambda: Option<f64>,
    control_point_residual: f64,
    dice: DiceScores,
    timing_ms: f64,
    /// URL of the warped frame.
    frame: String,
}

fn frame_url(r: &RegisterRequest) -> String {
    format!(
        "/api/warped?moving={}&fixed={}&modality_m={}&modality_f={}&transform={}&lambda={}",
        r.moving, r.fixed, r.modality_m, r.modality_f, r.transform, r.lambda
    )
}

fn do_register(s: &AppState, r: &RegisterRequest) -> ApiResult<(RegistrationResult, DiceScores)> {
    let kind = parse_kind(&r.transform, r.lambda)?;
    let (sm, moving) = s.image(&r.moving, r.modality_m)?;
    let (sf, fixed) = s.image(&r.fixed, r.modality_f)?;
    let p = s.keypoints(&r.moving, r.modality_m)?;
    let q = s.keypoints(&r.fixed, r.modality_f)?;
    let res = register_keypoints(kind, &moving, p, fixed.spatial(), q)?;
    let d = dice(&res.warp_labels(&sm.labels, sf.shape())?, &sf.labels)?;
    Ok((res, d))
}

async fn register(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: RegisterRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    blocking(move || {
        let (res, d) = do_register(&s, &req)?;
        Ok(json_response(&RegisterResponse {
            moving: &req.moving,
            fixed: &req.fixed,
            transform: &res.transform,
            moving_keypoints: &res.moving_keypoints,
            fixed_keypoints: &res.fixed_keypoints,
            lambda: res.lambda,
            control_point_residual: res.control_point_residual()?,
            dice: d,
            timing_ms: res.timing_ms,
            frame: frame_url(&req),
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct WarpedQuery {
    #[serde(flatten)]
    req: RegisterQuery,
    #[serde(default)]
    format: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RegisterQuery {
    moving: String,
    fixed: String,
    #[serde(default)]
    modality_m: usize,
    #[serde(default)]
    modality_f: usize,
    #[serde(default = "default_transform")]
    transform: String,
    #[serde(default)]
    lambda: f64,
}

impl From<RegisterQuery> for RegisterRequest {
    fn from(q: RegisterQuery) -> Self {
        Self { moving: q.moving, fixed: q.fixed, modality_m: q.modality_m, modality_f: q.modality_f, transform: q.transform, lambda: q.lambda }
    }
}

/// Warped frame as PNG (default) or exact KMT data (`format=kmt`).
async fn warped(State(s): State<Arc<AppState>>, Query(q): Query<WarpedQuery>) -> ApiResult<Response> {
    blocking(move || {
        let fmt = q.format.clone().unwrap_or_else(|| "png".into());
        let req: RegisterRequest = q.req.into();
        let (res, _) = do_register(&s, &req)?;
        let t = res.warped.expect("register warps").first_channel();
        match fmt.as_str() {
            "png" => Ok(png_response(encode_png_gray(&display_slice(&t))?)),
            "kmt" => Ok(([(header::CONTENT_TYPE, "application/octet-stream")], encode_kmt(&t, DType::F32)).into_response()),
            f => Err(ApiError::bad_request(format!("unknown format {f:?}"))),
        }
    })
    .await
}

#[derive(Debug, Deserialize)]
struct SweepQuery {
    moving: String,
    fixed: String,
    #[serde(default)]
    modality_m: usize,
    #[serde(default)]
    modality_f: usize,
    lambdas: Option<String>,
}

#[derive(Serialize)]
struct SweepEntryResponse {
    lambda: f64,
    transform: TransformParams,
    moving_keypoints: KeypointSet,
    fixed_keypoints: KeypointSet,
    control_point_residual: f64,
    dice: Option<DiceScores>,
    frame: String,
}

async fn sweep(State(s): State<Arc<AppState>>, Query(q): Query<SweepQuery>) -> ApiResult<Response> {
    let lambdas = crate::parse_lambdas(q.lambdas.as_deref().unwrap_or("0,0.01,0.1,1,10")).map_err(|e| ApiError::bad_request(e.to_string()))?;
    blocking(move || {
        let (sm, moving) = s.image(&q.moving, q.modality_m)?;
        let (sf, fixed) = s.image(&q.fixed, q.modality_f)?;
        let det = CachedDetector { state: &s, entries: vec![(q.moving.clone(), q.modality_m), (q.fixed.clone(), q.modality_f)] };
        let entries = lambda_sweep(&det, &moving, &fixed, &lambdas, Some((&sm.labels, &sf.labels)))?
            .into_iter()
            .map(|e| {
                let req = RegisterRequest {
                    moving: q.moving.clone(),
                    fixed: q.fixed.clone(),
                    modality_m: q.modality_m,
                    modality_f: q.modality_f,
                    transform: "tps".into(),
                    lambda: e.lambda,
                };
                Ok(SweepEntryResponse {
                    lambda: e.lambda,
                    control_point_residual: e.result.control_point_residual()?,
                    transform: e.result.transform,
                    moving_keypoints: e.result.moving_keypoints,
                    fixed_keypoints: e.result.fixed_keypoints,
                    dice: e.dice,
                    frame: frame_url(&req),
                })
            })
            .collect::<ApiResult<Vec<_>>>()?;
        Ok(json_response(&serde_json::json!({
            "moving": q.moving,
            "fixed": q.fixed,
            "lambdas": lambdas,
            "entries": entries,
        })))
    })
    .await
}

/// The API routes, plus static files from `static_dir` at `/`.
pub fn router(state: Arc<AppState>, static_dir: Option<&FsPath>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/subjects", get(subjects))
        .route("/api/image/{subject}/{modality}", get(image))
        .route("/api/keypoints/{subject}/{modality}", get(keypoints))
        .route("/api/register", post(register))
        .route("/api/warped", get(warped))
        .route("/api/sweep", get(sweep))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub fn serve(a: &ServeArgs) -> CliResult<()> {
    let weights = load_weights(&a.weights)?;
    if !a.dataset.is_dir() {
        return Err(CliError::Usage(format!("dataset not found: {}", a.dataset.display())));
    }
    let state = Arc::new(AppState::new(weights, &a.dataset)?);
    let app = router(state, a.static_dir.as_deref());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", a.port)).await?;
        println!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app).await
    })?;
    Ok(())
}
