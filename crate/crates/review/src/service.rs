//! HTTP API under `/api` plus static UI assets at `/`.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tlpim_core::matcher::Decision;
use tower_http::services::ServeDir;

use crate::error::{ReviewError, ReviewResult};
use crate::queue::{PairCase, ReviewQueue, Status};
use crate::verdicts::{export_verdicts, replay, Submission, Verdict, VerdictLog, VerdictRecord, ReviewState};

/// Queue, verdict state and the single log appender.
pub struct Review {
    queue: ReviewQueue,
    state: RwLock<ReviewState>,
    log: Mutex<VerdictLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pair_id: String,
    pub probe_id: String,
    pub reference_id: String,
    pub similarity: f64,
    pub algorithm_decision: Decision,
    pub status: Status,
    pub probe_pmi: f64,
    pub reference_pmi: f64,
    pub verdict: Option<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDetail {
    #[serde(flatten)]
    pub case: PairCase,
    pub status: Status,
    pub threshold: f64,
    pub verdict: Option<VerdictRecord>,
    pub history: Vec<VerdictRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatusFilter {
    Pending,
    Reviewed,
    #[default]
    All,
}

impl Review {
    /// Replays the existing log at `log_path` against `queue`, then opens it for appending.
    pub fn open(queue: ReviewQueue, log_path: &std::path::Path) -> ReviewResult<Self> {
        let state = replay(log_path, |id| queue.contains(id))?;
        let log = VerdictLog::open(log_path)?;
        Ok(Self {
            queue,
            state: RwLock::new(state),
            log: Mutex::new(log),
        })
    }

    pub fn queue(&self) -> &ReviewQueue {
        &self.queue
    }

    pub fn state(&self) -> ReviewState {
        self.state.read().expect("state lock").clone()
    }

    pub fn summaries(&self, filter: StatusFilter) -> Vec<PairSummary> {
        let state = self.state.read().expect("state lock");
        self.queue
            .cases()
            .iter()
            .filter_map(|c| {
                let status = state.status(&c.pair_id);
                let keep = match filter {
                    StatusFilter::All => true,
                    StatusFilter::Pending => status == Status::Pending,
                    StatusFilter::Reviewed => status == Status::Reviewed,
                };
                keep.then(|| PairSummary {
                    pair_id: c.pair_id.clone(),
                    probe_id: c.probe.sample_id(),
                    reference_id: c.reference.sample_id(),
                    similarity: c.similarity,
                    algorithm_decision: c.algorithm_decision,
                    status,
                    probe_pmi: c.probe.pmi_hours,
                    reference_pmi: c.reference.pmi_hours,
                    verdict: state.effective(&c.pair_id).map(|v| v.verdict),
                })
            })
            .collect()
    }

    pub fn detail(&self, pair_id: &str) -> ReviewResult<PairDetail> {
        let case = self
            .queue
            .get(pair_id)
            .ok_or_else(|| ReviewError::NotFound(format!("pair `{pair_id}`")))?;
        let state = self.state.read().expect("state lock");
        Ok(PairDetail {
            case: case.clone(),
            status: state.status(pair_id),
            threshold: self.queue.threshold,
            verdict: state.effective(pair_id).cloned(),
            history: state.history_of(pair_id).cloned().collect(),
        })
    }

    /// Appends the verdict to the log, then publishes it to readers.
    pub fn record_verdict(&self, pair_id: &str, submission: Submission, now: DateTime<Utc>) -> ReviewResult<VerdictRecord> {
        if !self.queue.contains(pair_id) {
            return Err(ReviewError::NotFound(format!("pair `{pair_id}`")));
        }
        let record = VerdictRecord {
            pair_id: pair_id.to_string(),
            verdict: submission.verdict,
            notes: submission.notes,
            recorded_at: now,
        };
        let mut log = self.log.lock().expect("log lock");
        log.append(&record)?;
        self.state.write().expect("state lock").apply(record.clone());
        Ok(record)
    }

    pub fn export_csv(&self) -> String {
        export_verdicts(self.queue.cases(), &self.state.read().expect("state lock"))
    }
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let status = match &self {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Deserialize)]
struct ListQuery {
    #[serde(default)]
    status: StatusFilter,
}

async fn list_pairs(State(review): State<Arc<Review>>, Query(q): Query<ListQuery>) -> Json<Vec<PairSummary>> {
    Json(review.summaries(q.status))
}

async fn get_pair(State(review): State<Arc<Review>>, Path(id): Path<String>) -> ReviewResult<Json<PairDetail>> {
    review.detail(&id).map(Json)
}

async fn get_layer(
    State(review): State<Arc<Review>>,
    Path((id, sample, layer)): Path<(String, String, String)>,
) -> ReviewResult<Response> {
    let png = review.queue().layer_png(&id, &sample, &layer)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn post_verdict(State(review): State<Arc<Review>>, Path(id): Path<String>, body: Bytes) -> ReviewResult<Response> {
    if !review.queue().contains(&id) {
        return Err(ReviewError::NotFound(format!("pair `{id}`")));
    }
    let submission: Submission =
        serde_json::from_slice(&body).map_err(|e| ReviewError::Invalid(format!("bad verdict body: {e}")))?;
    let record = review.record_verdict(&id, submission, Utc::now())?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn export(State(review): State<Arc<Review>>) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], review.export_csv()).into_response()
}

async fn fallback_index() -> Html<&'static str> {
    Html(FALLBACK_PAGE)
}

/// Routes for the review API; `static_dir` holds UI assets served at `/`.
pub fn router(review: Arc<Review>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/pairs", get(list_pairs))
        .route("/api/pairs/{id}", get(get_pair))
        .route("/api/pairs/{id}/layers/{sample}/{layer}", get(get_layer))
        .route("/api/pairs/{id}/verdict", post(post_verdict))
        .route("/api/export", get(export))
        .with_state(review);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(fallback_index)),
    }
}

const FALLBACK_PAGE: &str = r#"<!doctype html>
<html lang="en">
<head><meta charset="utf-8"><title>Iris pair review</title>
<style>
body { font-family: sans-serif; margin: 2em; }
td, th { padding: 0.2em 0.8em; text-align: left; }
.match { color: #080; } .nonmatch { color: #a00; }
</style></head>
<body>
<h1>Pending pairs</h1>
<table id="queue"><thead><tr><th>pair</th><th>probe</th><th>reference</th><th>similarity</th><th>decision</th><th>PMI (h)</th></tr></thead><tbody></tbody></table>
<script>
fetch('/api/pairs?status=pending').then(r => r.json()).then(rows => {
  const body = document.querySelector('#queue tbody');
  if (!rows.length) { body.innerHTML = '<tr><td colspan="6">no pending pairs</td></tr>'; return; }
  for (const p of rows) {
    const tr = document.createElement('tr');
    for (const v of [p.pair_id, p.probe_id, p.reference_id, p.similarity.toFixed(4), p.algorithm_decision, p.probe_pmi + ' / ' + p.reference_pmi]) {
      const td = document.createElement('td'); td.textContent = v; tr.appendChild(td);
    }
    tr.children[4].className = p.algorithm_decision;
    body.appendChild(tr);
  }
});
</script>
</body>
</html>
"#;
