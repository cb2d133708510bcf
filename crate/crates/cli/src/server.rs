//! HTTP rating service.

use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mlrl_core::trainer::{SharedQueue, SharedStatus};
use mlrl_core::Error;
use serde::{Deserialize, Serialize};

const INDEX_HTML: &str = include_str!("../assets/index.html");

/// Class names shown to raters, worst first.
pub fn class_labels(n: usize) -> Vec<&'static str> {
    match n {
        2 => vec!["Bad", "Good"],
        3 => vec!["Bad", "Average", "Good"],
        4 => vec!["Very Bad", "Bad", "Good", "Very Good"],
        5 => vec!["Very Bad", "Bad", "Average", "Good", "Very Good"],
        6 => vec!["Very Bad", "Bad", "Below Average", "Above Average", "Good", "Very Good"],
        _ => Vec::new(),
    }
}

#[derive(Clone)]
pub struct AppState {
    pub queue: SharedQueue,
    pub status: SharedStatus,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RatingBody {
    pub segment_id: String,
    pub rating: i64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusBody {
    pub phase: String,
    pub cycle: usize,
    pub n: usize,
    pub labels: Vec<String>,
    pub buffer_sizes: Vec<usize>,
    pub pending: usize,
    pub eval_return: Option<f64>,
}

fn error(code: StatusCode, msg: impl Into<String>) -> Response {
    (code, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn poisoned() -> Response {
    error(StatusCode::INTERNAL_SERVER_ERROR, "shared state poisoned")
}

async fn index() -> impl IntoResponse {
    ([(header::CACHE_CONTROL, "no-cache")], Html(INDEX_HTML))
}

async fn pending(State(app): State<AppState>) -> Response {
    match app.queue.lock() {
        Ok(q) => Json(q.pending()).into_response(),
        Err(_) => poisoned(),
    }
}

async fn rate(State(app): State<AppState>, Json(body): Json<RatingBody>) -> Response {
    let Ok(mut q) = app.queue.lock() else {
        return poisoned();
    };
    let n = q.n();
    if body.rating < 0 || body.rating as usize >= n {
        return error(
            StatusCode::BAD_REQUEST,
            format!("rating {} out of range, expected 0..={}", body.rating, n - 1),
        );
    }
    match q.submit(&body.segment_id, body.rating as usize) {
        Ok(()) => Json(serde_json::json!({ "segment_id": body.segment_id, "rating": body.rating })).into_response(),
        Err(e @ Error::UnknownSegment(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn status(State(app): State<AppState>) -> Response {
    let pending = match app.queue.lock() {
        Ok(q) => q.pending_len(),
        Err(_) => return poisoned(),
    };
    let Ok(s) = app.status.lock() else {
        return poisoned();
    };
    Json(StatusBody {
        phase: s.phase.clone(),
        cycle: s.cycle,
        n: s.n,
        labels: class_labels(s.n).into_iter().map(String::from).collect(),
        buffer_sizes: s.buffer_sizes.clone(),
        pending,
        eval_return: s.eval_return,
    })
    .into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/index.html", get(index))
        .route("/segments/pending", get(pending))
        .route("/ratings", post(rate))
        .route("/status", get(status))
        .with_state(state)
}
