//! `gls serve`: the provider wire protocol plus `/v1/score`, backed by the same
//! evaluator and handlers as the batch commands.
//!
//! Providers are constructed before the async runtime starts (the remote
//! client is blocking), and every provider or scoring call runs on the
//! blocking pool.

use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::anyhow;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clap::Args;
use serde::{Deserialize, Serialize};

use gls_core::fusion::TOOL_VERSION;
use gls_core::providers::wire::{
    decode_png_b64, handle_embed_image, handle_embed_text, handle_generate, handle_nli, EmbedImageRequest,
    EmbedTextRequest, ErrorBody, GenerateRequest, NliRequest, PATH_EMBED_IMAGE, PATH_EMBED_TEXT, PATH_GENERATE,
    PATH_NLI,
};
use gls_core::providers::ProviderError;
use gls_core::{CaseInput, Evaluator, ScoreBundle};

use super::{CliError, CliResult, CommonArgs, ConfigContext, Context, EXIT_OK};

pub const PATH_SCORE: &str = "/v1/score";
pub const PATH_HEALTH: &str = "/healthz";
/// Environment variable consulted when `--token` is absent.
pub const TOKEN_ENV: &str = "GLS_TOKEN";
const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Address to bind; port 0 picks a free port (printed on stdout).
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Shared bearer token required on every request except the health check.
    #[arg(long)]
    pub token: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub case_id: String,
    pub image_png_b64: String,
    #[serde(default)]
    pub report: Option<String>,
}

#[derive(Debug, Serialize)]
struct Health<'a> {
    status: &'static str,
    tool_version: &'static str,
    config_hash: &'a str,
}

struct AppState {
    evaluator: Evaluator,
    token: Option<String>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

impl From<ProviderError> for ApiError {
    fn from(e: ProviderError) -> Self {
        let status = match e {
            ProviderError::Unreachable { .. } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.token else {
        return Ok(());
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError(
            StatusCode::UNAUTHORIZED,
            "missing or invalid bearer token".into(),
        ))
    }
}

/// Runs `f` on the blocking pool with the shared state.
async fn blocking<T, F>(state: Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
}

async fn embed_text(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<EmbedTextRequest>, JsonRejection>,
) -> Response {
    let run = async {
        authorize(&state, &headers)?;
        let Json(req) = body?;
        blocking(state.clone(), move |s| {
            Ok(handle_embed_text(s.evaluator.providers.text.as_ref(), &req)?)
        })
        .await
    };
    run.await.into_response()
}

async fn embed_image(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<EmbedImageRequest>, JsonRejection>,
) -> Response {
    let run = async {
        authorize(&state, &headers)?;
        let Json(req) = body?;
        blocking(state.clone(), move |s| {
            Ok(handle_embed_image(s.evaluator.providers.image.as_ref(), &req)?)
        })
        .await
    };
    run.await.into_response()
}

async fn nli(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<NliRequest>, JsonRejection>,
) -> Response {
    let run = async {
        authorize(&state, &headers)?;
        let Json(req) = body?;
        blocking(state.clone(), move |s| {
            Ok(handle_nli(s.evaluator.providers.nli.as_ref(), &req)?)
        })
        .await
    };
    run.await.into_response()
}

async fn generate(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<GenerateRequest>, JsonRejection>,
) -> Response {
    let run = async {
        authorize(&state, &headers)?;
        let Json(req) = body?;
        blocking(state.clone(), move |s| {
            let subject = s
                .evaluator
                .providers
                .subject
                .as_ref()
                .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "no subject provider configured".into()))?;
            Ok(handle_generate(subject.as_ref(), &req)?)
        })
        .await
    };
    run.await.into_response()
}

async fn score(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<ScoreRequest>, JsonRejection>,
) -> Response {
    let run = async {
        authorize(&state, &headers)?;
        let Json(req) = body?;
        blocking(state.clone(), move |s| -> Result<ScoreBundle, ApiError> {
            let image =
                decode_png_b64(&req.image_png_b64).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
            s.evaluator
                .evaluate(&CaseInput {
                    case_id: &req.case_id,
                    image: &image,
                    report: req.report.as_deref(),
                })
                .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
        })
        .await
    };
    run.await.into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    Json(Health {
        status: "ok",
        tool_version: TOOL_VERSION,
        config_hash: state.evaluator.config_hash(),
    })
    .into_response()
}

fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route(PATH_EMBED_TEXT, post(embed_text))
        .route(PATH_EMBED_IMAGE, post(embed_image))
        .route(PATH_NLI, post(nli))
        .route(PATH_GENERATE, post(generate))
        .route(PATH_SCORE, post(score))
        .route(PATH_HEALTH, get(health))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub fn run(args: &ServeArgs) -> CliResult<u8> {
    let ctx = Context::load(&args.common)?;
    let token = args
        .token
        .clone()
        .or_else(|| std::env::var(TOKEN_ENV).ok())
        .filter(|t| !t.is_empty());
    let state = Arc::new(AppState {
        evaluator: ctx.evaluator.clone(),
        token,
    });
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .io_err("starting async runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(args.addr)
            .await
            .map_err(|e| CliError::Config(anyhow!("binding {}: {e}", args.addr)))?;
        let local = listener.local_addr().io_err("reading bound address")?;
        println!("listening on http://{local}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .io_err("serving")
    })?;
    ctx.flush_transcript()?;
    Ok(EXIT_OK)
}
