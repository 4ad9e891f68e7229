use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use inout_core::diffusion::{SamplerSettings, ToyConfig, ToyDenoiser};
use inout_core::experiment::load_fragment_samples;
use inout_core::image::Image;
use inout_core::lora::MergeWeight;
use inout_core::manifest::{ImageSample, Label, Source, Split};
use inout_core::mixer::DiffusionSource;
use inout_review::{router, AdapterSource, AppState, Store};
use serde_json::{json, Value};
use tower::ServiceExt;

/// Cheap deterministic generator: flat images whose value depends on seed
/// and index. Prompts containing "explode" fail.
struct Flat;

impl DiffusionSource for Flat {
    fn generate(&self, prompt: &str, count: usize, seed: u64) -> inout_core::Result<Vec<ImageSample>> {
        if prompt.contains("explode") {
            return Err(inout_core::Error::Backend("generator exploded".into()));
        }
        Ok((0..count)
            .map(|i| {
                let v = ((seed % 97) as f32 + i as f32) / 200.0;
                ImageSample::new(format!("g{i}"), Image::filled(16, 48, v), Label::Positive, Source::Diffusion, Split::Train)
            })
            .collect())
    }
}

fn app_with(dir: &std::path::Path, generator: Arc<dyn DiffusionSource + Send>, token: Option<&str>) -> Router {
    router(AppState::new(Store::open(dir).unwrap(), generator, token.map(String::from)))
}

fn app(dir: &std::path::Path) -> Router {
    app_with(dir, Arc::new(Flat), None)
}

async fn raw(app: &Router, method: &str, uri: &str, body: Option<Value>, headers: &[(&str, &str)]) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let body = match body {
        Some(v) => Body::from(v.to_string()),
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.header("content-type", "application/json").body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = raw(app, method, uri, body, &[]).await;
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).expect("json response") };
    (status, v)
}

async fn create(app: &Router, prompt: &str) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(json!({ "prompt": prompt }))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn wait_job(app: &Router, job: &str) -> Value {
    for _ in 0..2000 {
        let (status, v) = call(app, "GET", &format!("/jobs/{job}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if v["state"] == "succeeded" || v["state"] == "failed" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {job} did not finish");
}

async fn generate(app: &Router, sid: &str, count: usize, seed: Option<u64>) -> Value {
    let mut body = json!({ "count": count });
    if let Some(s) = seed {
        body["seed"] = json!(s);
    }
    let (status, v) = call(app, "POST", &format!("/sessions/{sid}/generate"), Some(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    wait_job(app, v["job_id"].as_str().unwrap()).await
}

async fn decide(app: &Router, sid: &str, sample: &str, decision: &str) -> (StatusCode, Value) {
    call(app, "POST", &format!("/sessions/{sid}/samples/{sample}/decision"), Some(json!({ "decision": decision }))).await
}

fn ids(v: &Value) -> Vec<String> {
    v.as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect()
}

#[tokio::test]
async fn create_session_contract() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (status, v) = call(&app, "POST", "/sessions", Some(json!({ "prompt": "skt background cracked" }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["status"], "open");
    assert_eq!(v["current_iteration"], 1);
    assert_eq!(v["prompt_history"].as_array().unwrap().len(), 1);
    assert_eq!(v["prompt_history"][0]["prompt"], "skt background cracked");

    for bad in [json!({ "prompt": "" }), json!({ "prompt": "   " }), json!({}), json!({ "prompt": 3 })] {
        let (status, v) = call(&app, "POST", "/sessions", Some(bad.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad} -> {v}");
        assert_eq!(v["error"], "validation");
    }

    let a = create(&app, "skt background cracked").await;
    let b = create(&app, "skt background cracked").await;
    assert_ne!(a, b);
    let (_, list) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(list["sessions"].as_array().unwrap().len(), 3);
    let (status, v) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_found");
}

#[tokio::test]
async fn generate_batch_contract() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let sid = create(&app, "skt background cracked").await;

    let job = generate(&app, &sid, 0, None).await;
    assert_eq!(job["state"], "succeeded");
    assert!(job["sample_ids"].as_array().unwrap().is_empty());

    call(&app, "POST", &format!("/sessions/{sid}/prompt"), Some(json!({ "prompt": "skt background scratched" }))).await;
    let job = generate(&app, &sid, 8, Some(11)).await;
    assert_eq!(job["state"], "succeeded", "{job}");
    assert_eq!(job["iteration"], 2);
    assert_eq!(job["prompt"], "skt background scratched");
    let new = ids(&job["sample_ids"]);
    assert_eq!(new.len(), 8);
    assert_eq!(new.iter().collect::<BTreeSet<_>>().len(), 8);

    let (_, s) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
    let samples = s["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 8);
    assert!(samples.iter().all(|x| x["decision"] == "pending" && x["iteration"] == 2));
    assert_eq!(s["counts"]["pending"], 8);

    // Image payloads are PNGs at the generator's resolution.
    let url = samples[0]["image_url"].as_str().unwrap();
    let (status, png) = raw(&app, "GET", url, None, &[]).await;
    assert_eq!(status, StatusCode::OK);
    let img = Image::from_png_bytes(&png).unwrap();
    assert_eq!(img.dims(), (16, 48));
    assert_eq!(img.digest(), samples[0]["digest"].as_str().unwrap());
    let (status, _) = raw(&app, "GET", &format!("/sessions/{sid}/samples/missing/image"), None, &[]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    for bad in [json!({ "count": -1 }), json!({ "count": 5000 }), json!({ "cnt": 1 })] {
        let (status, _) = call(&app, "POST", &format!("/sessions/{sid}/generate"), Some(bad.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
    let (status, _) = call(&app, "GET", "/jobs/unknown", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn explicit_seeds_reproduce_images() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let mut digests = Vec::new();
    for _ in 0..2 {
        let sid = create(&app, "skt background cracked").await;
        generate(&app, &sid, 3, Some(42)).await;
        let (_, s) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
        digests.push(s["samples"].as_array().unwrap().iter().map(|x| x["digest"].clone()).collect::<Vec<_>>());
    }
    assert_eq!(digests[0], digests[1]);
}

#[tokio::test]
async fn failed_generation_is_reported_on_the_job() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let sid = create(&app, "skt background explode").await;
    let job = generate(&app, &sid, 4, None).await;
    assert_eq!(job["state"], "failed");
    assert!(job["error"].as_str().unwrap().contains("exploded"));
    let (_, s) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
    assert!(s["samples"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn decide_contract() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let sid = create(&app, "skt background cracked").await;
    let s = ids(&generate(&app, &sid, 3, None).await["sample_ids"]);

    let (status, v) = decide(&app, &sid, &s[0], "accepted").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["decision"], "accepted");
    assert!(v["decided_at_ms"].as_u64().is_some());

    let (status, v) = call(
        &app,
        "POST",
        &format!("/sessions/{sid}/samples/{}/decision", s[1]),
        Some(json!({ "decision": "rejected", "note": "stripes only" })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["decision"], "rejected");
    assert_eq!(v["note"], "stripes only");

    let (status, v) = decide(&app, &sid, &s[0], "accepted").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], "conflict");
    let (status, _) = decide(&app, &sid, &s[1], "accepted").await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = decide(&app, &sid, "nope", "accepted").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for bad in ["pending", "maybe"] {
        let (status, _) = decide(&app, &sid, &s[2], bad).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
    let (_, v) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(v["counts"], json!({ "pending": 1, "accepted": 1, "rejected": 1 }));
}

#[tokio::test]
async fn revise_prompt_contract() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let sid = create(&app, "skt background cracked").await;
    let uri = format!("/sessions/{sid}/prompt");
    let (status, v) = call(&app, "POST", &uri, Some(json!({ "prompt": "skt background scratched" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["iteration"], 2);
    let (_, v) = call(&app, "POST", &uri, Some(json!({ "prompt": "skt background scratched" }))).await;
    assert_eq!(v["iteration"], 3);
    assert_eq!(v["session"]["prompt_history"].as_array().unwrap().len(), 3);
    let (status, _) = call(&app, "POST", &uri, Some(json!({ "prompt": "" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn export_contract() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let sid = create(&app, "skt background cracked").await;
    let s = ids(&generate(&app, &sid, 8, None).await["sample_ids"]);

    let (status, v) = call(&app, "POST", &format!("/sessions/{sid}/export"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "validation");

    for (i, x) in s.iter().enumerate() {
        decide(&app, &sid, x, if i % 3 == 0 { "rejected" } else { "accepted" }).await;
    }
    // Two pending samples must not leak into the fragment.
    let s2 = ids(&generate(&app, &sid, 2, None).await["sample_ids"]);
    let accepted: Vec<String> = s.iter().enumerate().filter(|(i, _)| i % 3 != 0).map(|(_, x)| x.clone()).collect();
    assert_eq!(accepted.len(), 5);

    let (status, first) = call(&app, "POST", &format!("/sessions/{sid}/export"), None).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    let records = first["records"].as_array().unwrap();
    assert_eq!(records.len(), 5);
    let got: Vec<String> = records.iter().map(|r| r["id"].as_str().unwrap().to_string()).collect();
    assert_eq!(got, accepted);
    assert!(records.iter().all(|r| r["label"] == "positive" && r["source"] == "diffusion"));

    let (status, second) = call(&app, "POST", &format!("/sessions/{sid}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first, second);

    // Exported sessions are read-only.
    let (_, v) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(v["status"], "exported");
    let (status, _) = decide(&app, &sid, &s2[0], "accepted").await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", &format!("/sessions/{sid}/generate"), Some(json!({ "count": 1 }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", &format!("/sessions/{sid}/prompt"), Some(json!({ "prompt": "x" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn concurrent_jobs_get_unique_ids() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let sid = create(&app, "skt background cracked").await;
    let mut pending = Vec::new();
    for n in 1..=6 {
        let (_, v) = call(&app, "POST", &format!("/sessions/{sid}/generate"), Some(json!({ "count": n }))).await;
        pending.push(v["job_id"].as_str().unwrap().to_string());
    }
    let mut all = BTreeSet::new();
    for job in pending {
        all.extend(ids(&wait_job(&app, &job).await["sample_ids"]));
    }
    assert_eq!(all.len(), 21);
    let (_, v) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(v["samples"].as_array().unwrap().len(), 21);
}

#[tokio::test]
async fn operator_token_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(dir.path(), Arc::new(Flat), Some("s3cret"));
    let body = Some(json!({ "prompt": "skt background cracked" }));
    let (status, _) = raw(&app, "POST", "/sessions", body.clone(), &[]).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = raw(&app, "POST", "/sessions", body.clone(), &[("authorization", "Bearer wrong")]).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = raw(&app, "POST", "/sessions", body.clone(), &[("authorization", "Bearer s3cret")]).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _) = raw(&app, "GET", "/sessions", None, &[("x-operator-token", "s3cret")]).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = raw(&app, "GET", "/health", None, &[]).await;
    assert_eq!(status, StatusCode::OK);
}

/// Full operator cycle against the toy backend, then the export is loaded
/// into the mixer's pool and the service is restarted from its logs.
#[tokio::test]
async fn hil_round_trip_feeds_the_pool_and_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let backend = ToyDenoiser::new(ToyConfig { width: 16, height: 48, ..Default::default() }, 3).unwrap();
    let source = AdapterSource {
        backend: Arc::new(backend),
        adapter: None,
        alpha: MergeWeight::new(0.6).unwrap(),
        settings: SamplerSettings { steps: 4, ..Default::default() },
    };
    let app = app_with(dir.path(), Arc::new(source), None);

    let sid = create(&app, "skt background cracked").await;
    let first = ids(&generate(&app, &sid, 8, None).await["sample_ids"]);
    assert_eq!(first.len(), 8);
    for (i, x) in first.iter().enumerate() {
        decide(&app, &sid, x, if i < 5 { "accepted" } else { "rejected" }).await;
    }
    let (_, v) = call(&app, "POST", &format!("/sessions/{sid}/prompt"), Some(json!({ "prompt": "skt background scratched" }))).await;
    assert_eq!(v["iteration"], 2);
    let second = ids(&generate(&app, &sid, 4, None).await["sample_ids"]);
    decide(&app, &sid, &second[1], "accepted").await;
    decide(&app, &sid, &second[3], "rejected").await;

    let (status, export) = call(&app, "POST", &format!("/sessions/{sid}/export"), None).await;
    assert_eq!(status, StatusCode::OK, "{export}");
    let mut expected: Vec<String> = first[..5].to_vec();
    expected.push(second[1].clone());
    let got: Vec<String> = export["records"].as_array().unwrap().iter().map(|r| r["id"].as_str().unwrap().to_string()).collect();
    assert_eq!(got, expected);

    let fragment = std::path::PathBuf::from(export["fragment_path"].as_str().unwrap());
    let pool = load_fragment_samples(&fragment, (16, 48)).unwrap();
    assert_eq!(pool.iter().map(|s| s.id.clone()).collect::<Vec<_>>(), expected);
    for (s, r) in pool.iter().zip(export["records"].as_array().unwrap()) {
        assert_eq!(s.digest(), r["digest"].as_str().unwrap());
        assert_eq!(s.label, Label::Positive);
        assert_eq!(s.source, Source::Diffusion);
    }

    let (_, before) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
    drop(app);
    let restarted = app_with(dir.path(), Arc::new(Flat), None);
    let (_, after) = call(&restarted, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(before, after);
    let (_, again) = call(&restarted, "POST", &format!("/sessions/{sid}/export"), None).await;
    assert_eq!(again, export);
}

#[tokio::test]
async fn replay_tolerates_a_torn_final_line_only() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let sid = create(&app, "skt background cracked").await;
    generate(&app, &sid, 2, None).await;
    let (_, before) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
    drop(app);

    let log = dir.path().join("sessions").join(&sid).join("events.jsonl");
    let clean = std::fs::read_to_string(&log).unwrap();
    std::fs::write(&log, format!("{clean}{{\"event\":\"decid")).unwrap();
    let app = self::app(dir.path());
    let (_, after) = call(&app, "GET", &format!("/sessions/{sid}"), None).await;
    assert_eq!(before, after);
    drop(app);

    std::fs::write(&log, format!("garbage\n{clean}")).unwrap();
    assert!(Store::open(dir.path()).is_err());
}

#[tokio::test]
async fn serves_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let state = AppState::new(Store::open(dir.path()).unwrap(), Arc::new(Flat), None);
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(inout_review::serve(listener, state, async {
        rx.await.ok();
    }));

    let client = reqwest::Client::new();
    let resp = client
        .post(format!("http://{addr}/sessions"))
        .json(&json!({ "prompt": "skt background cracked" }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 201);
    let v: Value = resp.json().await.unwrap();
    let resp = client.get(format!("http://{addr}/sessions/{}", v["id"].as_str().unwrap())).send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 200);

    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
