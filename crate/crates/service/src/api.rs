//! HTTP routes under `/v1`.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::engine::{CounterfactualRequest, Engine, QueryRequest};
use crate::error::ServiceError;

#[derive(Serialize)]
struct Timing {
    elapsed_us: u128,
}

/// Response body plus a trailing `timing` member, the only part that may
/// differ between identical requests.
#[derive(Serialize)]
struct Timed<T> {
    #[serde(flatten)]
    body: T,
    timing: Timing,
}

fn timed<T: Serialize>(body: T, start: Instant) -> Json<Timed<T>> {
    Json(Timed {
        body,
        timing: Timing {
            elapsed_us: start.elapsed().as_micros(),
        },
    })
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            e if e.is_client_error() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(v)| v).map_err(|e| ServiceError::BadRequest(e.body_text()))
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    index_rows: usize,
    galleries: usize,
}

async fn health(State(engine): State<Arc<Engine>>) -> Json<Health> {
    Json(Health {
        status: "ok",
        index_rows: engine.rows(),
        galleries: engine.galleries.len(),
    })
}

async fn galleries(State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    Json(engine.galleries_view())
}

async fn patch(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.patch(&id)?))
}

async fn thumbnail(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let png = engine.thumbnail(&id)?;
    Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], png))
}

async fn query(State(engine): State<Arc<Engine>>, payload: Result<Json<QueryRequest>, JsonRejection>) -> ApiResult<impl IntoResponse> {
    let start = Instant::now();
    let req = body(payload)?;
    let resp = tokio::task::spawn_blocking(move || engine.query(&req))
        .await
        .map_err(|e| ServiceError::Config(e.to_string()))??;
    Ok(timed(resp, start))
}

async fn counterfactual(
    State(engine): State<Arc<Engine>>,
    payload: Result<Json<CounterfactualRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let start = Instant::now();
    let req = body(payload)?;
    let resp = tokio::task::spawn_blocking(move || engine.counterfactual(&req))
        .await
        .map_err(|e| ServiceError::Config(e.to_string()))??;
    Ok(timed(resp, start))
}

async fn clusters(State(engine): State<Arc<Engine>>, Path(run): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.clusters(&run)?))
}

async fn prototypes(State(engine): State<Arc<Engine>>, Path(run): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.prototypes(&run)?))
}

fn cors(origins: &[String]) -> Option<CorsLayer> {
    if origins.is_empty() {
        return None;
    }
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::from(Any)
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE]),
    )
}

pub fn router(engine: Arc<Engine>, cors_origins: &[String]) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/galleries", get(galleries))
        .route("/patches/{id}", get(patch))
        .route("/patches/{id}/thumbnail", get(thumbnail))
        .route("/query", post(query))
        .route("/counterfactual", post(counterfactual))
        .route("/clusters/{run}", get(clusters))
        .route("/prototypes/{run}", get(prototypes));
    let app = Router::new().nest("/v1", v1).with_state(engine);
    match cors(cors_origins) {
        Some(layer) => app.layer(layer),
        None => app,
    }
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Binds and serves until SIGINT or SIGTERM.
pub async fn serve(engine: Arc<Engine>, addr: std::net::SocketAddr, cors_origins: &[String]) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(engine, cors_origins))
        .with_graceful_shutdown(shutdown_signal())
        .await
}
