//! HTTP boundary of the engine for interactive clients.
//!
//! * `GET /model/meta`: counts, attribute schema and joint names.
//! * `POST /mesh`: a [`ParamRequest`] in, a binary [`MeshPayload`] out.
//! * `POST /fit`: an observation in, JSON-lines out (one `stage` record per
//!   finished stage, then a `result` or `error` record). `?stream=false`
//!   returns the bare fit result instead.
//!
//! One immutable model is shared by all requests; handlers keep no state.

mod payload;

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::Arc;

use armature::fitting::{fit_with, FitConfig, FitProblem, FitResult, Observation, StageTrace};
use armature::model::{BodyModel, ModelParams};
use armature::Error;
use axum::body::{Body, Bytes};
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tokio_stream::wrappers::ReceiverStream;
use tokio_stream::StreamExt;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use payload::{MeshPayload, PayloadError, HEADER_LEN, MAGIC, VERSION};

pub const NDJSON: &str = "application/x-ndjson";

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Schedule and weights used by `/fit`.
    pub fit: FitConfig,
    /// Allowed CORS origin; `None` allows any.
    pub allow_origin: Option<String>,
}

/// Parameters of one `/mesh` request. Coefficient lists may be shorter than
/// the model's component counts; missing entries are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamRequest {
    pub beta_s: Vec<f64>,
    pub beta_f: Vec<f64>,
    pub beta_k: Vec<f64>,
    /// Direct skeletal-attribute overrides by name.
    pub attributes: BTreeMap<String, f64>,
    /// Per-joint Euler angles, empty or `3J` values.
    pub theta: Vec<f64>,
    pub root_rotation: [f64; 3],
    pub root_translation: [f64; 3],
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub apply_correctives: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags { apply_correctives: true }
    }
}

impl Default for ParamRequest {
    fn default() -> Self {
        ParamRequest {
            beta_s: Vec::new(),
            beta_f: Vec::new(),
            beta_k: Vec::new(),
            attributes: BTreeMap::new(),
            theta: Vec::new(),
            root_rotation: [0.0; 3],
            root_translation: [0.0; 3],
            flags: Flags::default(),
        }
    }
}

impl ParamRequest {
    pub fn to_model_params(&self) -> ModelParams {
        ModelParams {
            beta_s: self.beta_s.clone(),
            beta_f: self.beta_f.clone(),
            beta_k: self.beta_k.clone(),
            attributes: self.attributes.clone(),
            theta: self.theta.clone(),
            root_rotation: self.root_rotation,
            root_translation: self.root_translation,
            apply_correctives: self.flags.apply_correctives,
        }
    }
}

/// One line of the `/fit` progress stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FitEvent {
    Stage(StageTrace),
    Result(Box<FitResult>),
    Error { status: u16, message: String },
}

/// JSON error body: a message and, for parse errors, the offending field path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError {
            status: status.as_u16(),
            error: error.into(),
            field: None,
        }
    }

    /// 422 for dimension violations, 400 for other input problems, 500 for
    /// everything raised while computing.
    pub fn from_core(e: &Error) -> Self {
        let status = match e {
            Error::Dimension { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Input(_) | Error::NonFinite(_) | Error::Precondition(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut err = ApiError::new(status, e.to_string());
        if let Error::Dimension { what, .. } = e {
            err.field = Some(what.clone());
        }
        err
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    model: Arc<BodyModel>,
    fit: Arc<FitConfig>,
}

pub fn router(model: BodyModel, cfg: ServiceConfig) -> armature::Result<Router> {
    model.check()?;
    cfg.fit.check()?;
    let origin = match &cfg.allow_origin {
        None => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| Error::Input(format!("invalid CORS origin `{o}`")))?),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE]);
    let state = AppState {
        model: Arc::new(model),
        fit: Arc::new(cfg.fit),
    };
    Ok(Router::new()
        .route("/model/meta", get(meta))
        .route("/mesh", post(mesh))
        .route("/fit", post(fit))
        .layer(cors)
        .with_state(state))
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app).await
}

/// Runs the full pipeline and encodes the result.
pub fn mesh_payload(model: &BodyModel, req: &ParamRequest) -> armature::Result<MeshPayload> {
    let out = model.mesh(&req.to_model_params())?;
    let f32s = |v: &[[f64; 3]]| v.iter().map(|p| p.map(|x| x as f32)).collect();
    Ok(MeshPayload {
        rig_id: model.rig.id.clone(),
        vertices: f32s(&out.vertices),
        faces: model.rig.template.faces.clone(),
        joints: f32s(&out.joints),
        echo: serde_json::to_string(req).expect("request serializes"),
    })
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let mut err = ApiError::new(StatusCode::BAD_REQUEST, e.inner().to_string());
        if path != "." {
            err.field = Some(path);
        }
        err
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))
}

async fn meta(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.model.meta())
}

async fn mesh(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: ParamRequest = parse(&body)?;
    let model = s.model.clone();
    let payload = blocking(move || mesh_payload(&model, &req))
        .await?
        .map_err(|e| ApiError::from_core(&e))?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], payload.encode()).into_response())
}

#[derive(Debug, Deserialize)]
struct FitQuery {
    stream: Option<bool>,
}

fn ndjson_line(ev: &FitEvent) -> Bytes {
    let mut line = serde_json::to_vec(ev).expect("events serialize");
    line.push(b'\n');
    Bytes::from(line)
}

async fn fit(State(s): State<AppState>, Query(q): Query<FitQuery>, body: Bytes) -> Result<Response, ApiError> {
    let obs: Observation = parse(&body)?;
    obs.check(&s.model)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    FitProblem::new(&s.model, &obs, &s.fit).map_err(|e| ApiError::from_core(&e))?;

    let (tx, mut rx) = mpsc::channel::<FitEvent>(16);
    let (model, cfg) = (s.model.clone(), s.fit.clone());
    tokio::task::spawn_blocking(move || {
        let res = fit_with(&model, &obs, &cfg, None, &mut |st| {
            let _ = tx.blocking_send(FitEvent::Stage(st.clone()));
        });
        let last = match res {
            Ok(r) => FitEvent::Result(Box::new(r)),
            Err(e) => FitEvent::Error {
                status: ApiError::from_core(&e).status,
                message: e.to_string(),
            },
        };
        let _ = tx.blocking_send(last);
    });

    if q.stream == Some(false) {
        while let Some(ev) = rx.recv().await {
            match ev {
                FitEvent::Stage(_) => {}
                FitEvent::Result(r) => return Ok(Json(*r).into_response()),
                FitEvent::Error { status, message } => {
                    return Err(ApiError {
                        status,
                        error: message,
                        field: None,
                    })
                }
            }
        }
        return Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "fit worker ended without a result",
        ));
    }

    // Errors raised before the first stage finishes still get a real status
    // code; later ones arrive as an `error` record.
    let first = rx
        .recv()
        .await
        .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "fit worker ended without a result"))?;
    if let FitEvent::Error { status, message } = first {
        return Err(ApiError {
            status,
            error: message,
            field: None,
        });
    }
    let head = tokio_stream::once(first);
    let lines = head.chain(ReceiverStream::new(rx)).map(|ev| Ok::<_, Infallible>(ndjson_line(&ev)));
    Ok(([(header::CONTENT_TYPE, NDJSON)], Body::from_stream(lines)).into_response())
}
