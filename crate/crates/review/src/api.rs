//! JSON-over-HTTP routes.

use std::collections::HashMap;
use std::future::Future;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use inout_core::hashing::{derive_indexed, derive_seed, sha256_hex};
use inout_core::image::Image;
use inout_core::manifest::{file_stem_for, read_fragment, write_fragment, Label, ManifestRecord, Source, Split};
use inout_core::mixer::DiffusionSource;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::error::ReviewError;
use crate::model::{Decision, Event, NewSample, ReviewSession, SessionStatus};
use crate::store::{now_ms, Store, FRAGMENT_FILE};

/// Upper bound on one generation request.
pub const MAX_BATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: String,
    pub session_id: String,
    pub iteration: u32,
    pub prompt: String,
    pub count: usize,
    pub seed: u64,
    pub state: JobState,
    pub sample_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at_ms: Option<u64>,
}

/// Shared server state. Jobs live in memory only; sessions are durable.
#[derive(Clone)]
pub struct AppState {
    store: Arc<Store>,
    generator: Arc<dyn DiffusionSource + Send>,
    token: Option<String>,
    jobs: Arc<Mutex<HashMap<String, JobStatus>>>,
}

impl AppState {
    pub fn new(store: Store, generator: Arc<dyn DiffusionSource + Send>, token: Option<String>) -> Self {
        Self { store: Arc::new(store), generator, token, jobs: Arc::default() }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn set_job(&self, id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = self.jobs.lock().expect("job lock").get_mut(id) {
            f(j);
        }
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/generate", post(generate))
        .route("/sessions/{id}/samples/{sid}/image", get(sample_image))
        .route("/sessions/{id}/samples/{sid}/decision", post(decide))
        .route("/sessions/{id}/prompt", post(revise_prompt))
        .route("/sessions/{id}/export", post(export))
        .route("/jobs/{id}", get(get_job))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new().route("/health", get(|| async { Json(json!({ "status": "ok" })) })).merge(api).with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(listener: TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let bearer = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        let custom = headers.get("x-operator-token").and_then(|v| v.to_str().ok());
        if bearer.or(custom) != Some(expected.as_str()) {
            return ReviewError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

/// Parses a JSON body, reporting every malformed request as a 400.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ReviewError> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ReviewError::Validation(format!("invalid request body: {e}")))
}

fn view(s: &ReviewSession) -> Value {
    let mut v = serde_json::to_value(s).expect("session serializes");
    for (sample, out) in s.samples.iter().zip(v["samples"].as_array_mut().expect("samples array")) {
        out["image_url"] = json!(format!("/sessions/{}/samples/{}/image", s.id, sample.id));
    }
    v["current_iteration"] = json!(s.current_iteration());
    v["counts"] = json!({
        "pending": s.count(Decision::Pending),
        "accepted": s.count(Decision::Accepted),
        "rejected": s.count(Decision::Rejected),
    });
    v
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptBody {
    prompt: String,
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ReviewError> {
    let b: PromptBody = parse(&body)?;
    let s = st.store.create(&b.prompt)?;
    log::info!("session {} created", s.id);
    Ok((StatusCode::CREATED, Json(view(&s))))
}

async fn list_sessions(State(st): State<AppState>) -> Result<Json<Value>, ReviewError> {
    let sessions: Vec<Value> = st
        .store
        .ids()
        .iter()
        .filter_map(|id| st.store.get(id).ok())
        .map(|s| {
            json!({
                "id": s.id,
                "status": s.status,
                "created_at_ms": s.created_at_ms,
                "current_iteration": s.current_iteration(),
                "prompt": s.current_prompt(),
                "samples": s.samples.len(),
            })
        })
        .collect();
    Ok(Json(json!({ "sessions": sessions })))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ReviewError> {
    Ok(Json(view(&st.store.get(&id)?)))
}

async fn revise_prompt(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ReviewError> {
    let b: PromptBody = parse(&body)?;
    let (s, iteration) = st.store.commit(&id, |s, _| {
        let iteration = s.current_iteration() + 1;
        Ok((Some(Event::PromptRevised { iteration, prompt: b.prompt, at_ms: now_ms() }), iteration))
    })?;
    Ok(Json(json!({ "iteration": iteration, "session": view(&s) })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    decision: Decision,
    #[serde(default)]
    note: Option<String>,
}

async fn decide(
    State(st): State<AppState>,
    Path((id, sid)): Path<(String, String)>,
    body: Bytes,
) -> Result<Json<Value>, ReviewError> {
    let b: DecisionBody = parse(&body)?;
    let (s, ()) = st.store.commit(&id, |_, _| {
        Ok((Some(Event::Decided { sample: sid.clone(), decision: b.decision, note: b.note, at_ms: now_ms() }), ()))
    })?;
    let sample = s.sample(&sid).expect("decided sample exists");
    Ok(Json(serde_json::to_value(sample).expect("sample serializes")))
}

async fn sample_image(State(st): State<AppState>, Path((id, sid)): Path<(String, String)>) -> Result<Response, ReviewError> {
    let s = st.store.get(&id)?;
    if s.sample(&sid).is_none() {
        return Err(ReviewError::NotFound(format!("sample {sid}")));
    }
    let path = st.store.session_dir(&id).join(image_rel(&sid));
    let bytes = std::fs::read(&path).map_err(|e| ReviewError::io(path.display().to_string(), e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn image_rel(sample: &str) -> String {
    format!("images/{}.png", file_stem_for(sample))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateBody {
    count: usize,
    #[serde(default)]
    seed: Option<u64>,
}

async fn generate(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ReviewError> {
    let b: GenerateBody = parse(&body)?;
    if b.count > MAX_BATCH {
        return Err(ReviewError::Validation(format!("count {} exceeds the batch limit of {MAX_BATCH}", b.count)));
    }
    let s = st.store.get(&id)?;
    if s.status == SessionStatus::Exported {
        return Err(ReviewError::Conflict(format!("session {id} is exported and read-only")));
    }
    let seed = b.seed.unwrap_or_else(|| {
        let base = derive_seed(0, &format!("review:{id}"));
        derive_indexed(base, "generate", s.samples.len() as u64)
    });
    let job = JobStatus {
        id: uuid::Uuid::new_v4().simple().to_string(),
        session_id: id.clone(),
        iteration: s.current_iteration(),
        prompt: s.current_prompt().to_string(),
        count: b.count,
        seed,
        state: JobState::Queued,
        sample_ids: Vec::new(),
        error: None,
        created_at_ms: now_ms(),
        finished_at_ms: None,
    };
    st.jobs.lock().expect("job lock").insert(job.id.clone(), job.clone());
    let worker = st.clone();
    let spec = job.clone();
    tokio::task::spawn_blocking(move || {
        worker.set_job(&spec.id, |j| j.state = JobState::Running);
        let result = run_job(&worker, &spec);
        worker.set_job(&spec.id, |j| {
            j.finished_at_ms = Some(now_ms());
            match result {
                Ok(ids) => {
                    j.state = JobState::Succeeded;
                    j.sample_ids = ids;
                }
                Err(e) => {
                    log::warn!("job {} failed: {e}", j.id);
                    j.state = JobState::Failed;
                    j.error = Some(e.to_string());
                }
            }
        });
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job.id, "job": job }))))
}

fn run_job(st: &AppState, job: &JobStatus) -> Result<Vec<String>, ReviewError> {
    let images = st.generator.generate(&job.prompt, job.count, job.seed)?;
    // Round-trip through PNG now so the recorded digest is that of the
    // stored file as any later reader will decode it.
    let encoded: Vec<(Vec<u8>, String)> = images
        .iter()
        .map(|s| {
            let png = s.image.to_png_bytes();
            let digest = Image::from_png_bytes(&png)?.digest();
            Ok((png, digest))
        })
        .collect::<Result<_, ReviewError>>()?;
    let (_, ids) = st.store.commit(&job.session_id, |s, dir| {
        let prefix: String = s.id.chars().take(8).collect();
        let start = s.samples.len();
        let mut samples = Vec::with_capacity(encoded.len());
        for (i, (png, digest)) in encoded.iter().enumerate() {
            let id = format!("{prefix}-{:05}", start + i + 1);
            inout_core::fsutil::write_atomic(&dir.join(image_rel(&id)), png)?;
            samples.push(NewSample { id, digest: digest.clone() });
        }
        let ids = samples.iter().map(|s| s.id.clone()).collect();
        let event = Event::SamplesAdded { job_id: job.id.clone(), iteration: job.iteration, samples, at_ms: now_ms() };
        Ok((Some(event), ids))
    })?;
    Ok(ids)
}

async fn get_job(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<JobStatus>, ReviewError> {
    let jobs = st.jobs.lock().expect("job lock");
    jobs.get(&id).cloned().map(Json).ok_or_else(|| ReviewError::NotFound(format!("job {id}")))
}

/// Exports the accepted samples as a manifest fragment. Repeating the call
/// returns the fragment written the first time.
async fn export(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ReviewError> {
    let (s, ()) = st.store.commit(&id, |s, dir| {
        if s.status == SessionStatus::Exported {
            return Ok((None, ()));
        }
        let accepted: Vec<_> = s.samples.iter().filter(|x| x.decision == Decision::Accepted).collect();
        if accepted.is_empty() {
            return Err(ReviewError::Validation("nothing to export: no sample has been accepted".into()));
        }
        let records: Vec<ManifestRecord> = accepted
            .iter()
            .map(|x| ManifestRecord {
                id: x.id.clone(),
                path: Some(image_rel(&x.id)),
                label: Label::Positive,
                source: Source::Diffusion,
                split: Split::Train,
                digest: x.digest.clone(),
            })
            .collect();
        write_fragment(&dir.join(FRAGMENT_FILE), &records)?;
        let event = Event::Exported {
            fragment: FRAGMENT_FILE.into(),
            sample_ids: accepted.iter().map(|x| x.id.clone()).collect(),
            at_ms: now_ms(),
        };
        Ok((Some(event), ()))
    })?;
    let export = s.export.as_ref().expect("exported session has an export record");
    let path = st.store.session_dir(&id).join(&export.fragment);
    let records = read_fragment(&path)?;
    let text = std::fs::read(&path).map_err(|e| ReviewError::io(path.display().to_string(), e))?;
    Ok(Json(json!({
        "session_id": s.id,
        "fragment_path": path,
        "fragment_digest": sha256_hex(&text),
        "exported_at_ms": export.at_ms,
        "records": records,
    })))
}
