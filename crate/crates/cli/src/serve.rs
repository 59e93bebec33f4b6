//! Inference-only HTTP scoring service.

use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use modctx_core::corpus::LabeledExample;
use modctx_core::deepmodels::{encode_one, load_artifact, ratio_for, InputField, ModelSpec, Network};
use modctx_core::features::HistoryIndex;
use modctx_core::textprep::PrepConfig;

use crate::artifacts::{read_history, require, MODELS};
use crate::config::RunConfig;

pub struct ServeState {
    pub network: Network,
    pub spec: ModelSpec,
    pub prep: PrepConfig,
    pub history: HistoryIndex,
    pub default_ratio: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    pub comment: String,
    pub title: Option<String>,
    pub path: Option<String>,
    pub user_id: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassifyResponse {
    pub decision: u8,
    pub probability: f64,
    pub model_name: String,
}

/// Loads the trained `model` and the history index from the run directory.
pub fn load_state(cfg: &RunConfig, model: &str) -> Result<ServeState> {
    let spec = ModelSpec::from_name(model)?;
    let rel = format!("{MODELS}/{}", spec.name);
    let dir = require(&cfg.out, &rel, "trained model artifact", "train")?;
    let (network, _) = load_artifact(&dir).with_context(|| format!("loading {}", dir.display()))?;
    Ok(ServeState {
        network,
        spec,
        prep: cfg.prep_config()?,
        history: read_history(&cfg.out)?,
        default_ratio: cfg.ratio.default_ratio,
    })
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn classify(state: &ServeState, body: &[u8]) -> Response {
    let req: ClassifyRequest = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request body: {e}")),
    };
    let spec = &state.spec;
    for (field, value, name) in [
        (InputField::Title, &req.title, "title"),
        (InputField::Path, &req.path, "path"),
    ] {
        if spec.uses(field) && value.is_none() {
            return error(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("model {} requires `{name}`", spec.name),
            );
        }
    }
    let ex = LabeledExample {
        post_id: 0,
        user_id: req.user_id.unwrap_or(i64::MIN),
        comment: req.comment,
        title: req.title.unwrap_or_default(),
        path: req.path.unwrap_or_default(),
        label: 0,
    };
    let outcome = ratio_for(spec, &ex, &state.history, state.default_ratio)
        .and_then(|ratio| encode_one(&state.network, &ex, &state.prep, ratio))
        .and_then(|encoded| state.network.predict_proba(&encoded));
    match outcome {
        Ok(p) => Json(ClassifyResponse {
            decision: u8::from(p >= 0.5),
            probability: p,
            model_name: spec.name.to_string(),
        })
        .into_response(),
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

pub fn router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route(
            "/classify",
            post(|State(s): State<Arc<ServeState>>, body: Bytes| async move { classify(&s, &body) }),
        )
        .with_state(state)
}

pub fn run(state: ServeState, addr: &str) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("serving {} on http://{}", state.spec.name, listener.local_addr()?);
        axum::serve(listener, router(Arc::new(state)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
