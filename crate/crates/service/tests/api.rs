use std::path::{Path, PathBuf};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use segscape::graph::{Criterion, CutConfig};
use segscape::session::{LabelMask, ProviderSpec, Session, SessionConfig};
use segscape::testkit::piecewise_scene;
use segscape_service::{router, AppState, ServerEvent};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    state: AppState,
    app: Router,
}

fn scene_session(dir: &Path, count: usize) -> (Session, Vec<LabelMask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut images = Vec::new();
    let mut grads = Vec::new();
    let mut gts = Vec::new();
    for i in 0..count {
        let regions = rng.random_range(4..=8);
        let scene = piecewise_scene(24, 24, regions, 0.05, &mut rng);
        let name = format!("scene{i:02}");
        let paths = scene.write(dir, &name).unwrap();
        images.push(paths.image);
        grads.push(paths.gradient);
        gts.push(scene.gt_mask(&name));
    }
    let cut = CutConfig::new(Criterion::Volume, 3.0).unwrap();
    let session = Session::ingest(&images, &grads, cut, ProviderSpec::Builtin, SessionConfig::default()).unwrap();
    (session, gts)
}

/// Four scenes; with `labeled`, every segment carries its majority ground-truth label.
fn fixture(labeled: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (mut session, gts) = scene_session(&root, 4);
    if labeled {
        for gt in &gts {
            session.apply_oracle_labels(&gt.image_id.clone(), gt).unwrap();
        }
    }
    let state = AppState::new(session, Some(root.join("session")));
    let app = router(state.clone());
    Fixture {
        _dir: dir,
        root,
        state,
        app,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn next_event(rx: &mut tokio::sync::broadcast::Receiver<ServerEvent>) -> ServerEvent {
    tokio::time::timeout(Duration::from_secs(60), rx.recv())
        .await
        .expect("event within timeout")
        .unwrap()
}

async fn wait_job_done(rx: &mut tokio::sync::broadcast::Receiver<ServerEvent>, id: u64) -> Value {
    loop {
        let ev = next_event(rx).await;
        if ev.kind == "job-done" && ev.data["id"] == id {
            return ev.data;
        }
    }
}

async fn load_batch(f: &Fixture, n: usize) -> Vec<String> {
    let (status, body) = call_json(&f.app, "POST", "/api/batch/next", Some(json!({ "n": n }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    body["keys"].as_array().unwrap().iter().map(|k| k.as_str().unwrap().to_owned()).collect()
}

impl Fixture {
    /// Shown count and keys, read straight from the session.
    async fn state_session(&self) -> (usize, Vec<String>) {
        let (_, body) = call_json(&self.app, "GET", "/api/session", None).await;
        let (_, proj) = call_json(&self.app, "GET", "/api/projection", None).await;
        let keys = proj["points"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["key"].as_str().unwrap().to_owned())
            .collect();
        (body["shown"].as_u64().unwrap() as usize, keys)
    }
}

#[tokio::test]
async fn projection_lists_every_shown_segment() {
    let f = fixture(true);
    let (_, body) = call_json(&f.app, "GET", "/api/projection", None).await;
    assert_eq!(body["points"].as_array().unwrap().len(), 0);

    let keys = load_batch(&f, 2).await;
    assert!(!keys.is_empty());
    let (status, body) = call_json(&f.app, "GET", "/api/projection", None).await;
    assert_eq!(status, StatusCode::OK);
    let points = body["points"].as_array().unwrap();
    let session = f.state_session().await;
    assert_eq!(points.len(), session.0);
    for p in points {
        assert!(p["x"].as_f64().unwrap().is_finite() && p["y"].as_f64().unwrap().is_finite());
        assert!(p["label"].is_u64(), "oracle-labeled segment shows its label: {p}");
        assert!(p["image"].as_str().unwrap().starts_with("scene"));
    }
    let returned: Vec<&str> = points.iter().map(|p| p["key"].as_str().unwrap()).collect();
    assert_eq!(returned, session.1.iter().map(String::as_str).collect::<Vec<_>>());
}

#[tokio::test]
async fn empty_box_labels_nothing() {
    let f = fixture(false);
    load_batch(&f, 4).await;
    let (_, label) = call_json(&f.app, "POST", "/api/palette", Some(json!({ "name": "a" }))).await;
    let rect = json!({ "x0": 1e6, "y0": 1e6, "x1": 1e6 + 1.0, "y1": 1e6 + 1.0 });
    let (status, body) = call_json(
        &f.app,
        "POST",
        "/api/labels/box",
        Some(json!({ "rect": rect, "label": label["id"], "request_id": "r1" })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "count": 0 }));
}

#[tokio::test]
async fn box_label_replay_is_idempotent() {
    let f = fixture(false);
    load_batch(&f, 4).await;
    let (_, a) = call_json(&f.app, "POST", "/api/palette", Some(json!({ "name": "a", "request_id": "p1" }))).await;
    let (_, again) = call_json(&f.app, "POST", "/api/palette", Some(json!({ "name": "a", "request_id": "p1" }))).await;
    assert_eq!(a, again);
    let (_, palette) = call_json(&f.app, "GET", "/api/palette", None).await;
    assert_eq!(palette["palette"].as_array().unwrap().len(), 1);

    let everything = json!({ "x0": -1e9, "y0": -1e9, "x1": 1e9, "y1": 1e9 });
    let req = json!({ "rect": everything, "label": a["id"], "request_id": "box-1" });
    let (s1, first) = call_json(&f.app, "POST", "/api/labels/box", Some(req.clone())).await;
    let events_after_first = call_json(&f.app, "GET", "/api/session", None).await.1["events"].clone();
    let (s2, second) = call_json(&f.app, "POST", "/api/labels/box", Some(req)).await;
    let events_after_second = call_json(&f.app, "GET", "/api/session", None).await.1["events"].clone();
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(first, second);
    assert_eq!(events_after_first, events_after_second);
    let shown = f.state_session().await.0;
    assert_eq!(first["count"].as_u64().unwrap() as usize, shown);

    // A failing request replays its error too.
    let bad = json!({ "rect": everything, "label": 99, "request_id": "box-2" });
    let (e1, b1) = call_json(&f.app, "POST", "/api/labels/box", Some(bad.clone())).await;
    let (e2, b2) = call_json(&f.app, "POST", "/api/labels/box", Some(bad)).await;
    assert_eq!(e1, StatusCode::NOT_FOUND);
    assert_eq!((e1, b1), (e2, b2));
}

#[tokio::test]
async fn train_streams_each_epoch_then_one_done() {
    let f = fixture(true);
    let epochs = SessionConfig::default().train.epochs;
    let mut rx = f.state.subscribe();
    let (status, job) = call_json(&f.app, "POST", "/api/train", Some(json!({ "request_id": "t1" }))).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{job}");
    let id = job["id"].as_u64().unwrap();
    assert_eq!(job["kind"], "train");

    let mut seen_epochs = Vec::new();
    let done = loop {
        let ev = next_event(&mut rx).await;
        assert_eq!(ev.data["id"], id);
        match ev.kind.as_str() {
            "job-progress" => seen_epochs.push(ev.data["epoch"].as_u64().unwrap() as usize),
            "job-done" => break ev.data,
            other => panic!("unexpected event {other}"),
        }
    };
    assert_eq!(seen_epochs, (1..=epochs).collect::<Vec<_>>());
    assert_eq!(done["state"], "done");
    assert_eq!(done["result"]["losses"].as_array().unwrap().len(), epochs);

    // Replaying the request returns the same job without starting another.
    let (_, replay) = call_json(&f.app, "POST", "/api/train", Some(json!({ "request_id": "t1" }))).await;
    assert_eq!(replay["id"], id);
    let extra = tokio::time::timeout(Duration::from_millis(300), rx.recv()).await;
    assert!(extra.is_err(), "no further events: {extra:?}");

    let (_, polled) = call_json(&f.app, "GET", &format!("/api/jobs/{id}"), None).await;
    assert_eq!(polled["state"], "done");
    assert_eq!(polled["progress"], 1.0);
}

#[tokio::test]
async fn train_without_labels_fails_once() {
    let f = fixture(false);
    let mut rx = f.state.subscribe();
    let (_, job) = call_json(&f.app, "POST", "/api/train", None).await;
    let done = wait_job_done(&mut rx, job["id"].as_u64().unwrap()).await;
    assert_eq!(done["state"], "failed");
    assert!(done["error"].as_str().unwrap().contains("insufficient labels"));
}

#[tokio::test]
async fn event_endpoint_streams_server_sent_events() {
    let f = fixture(true);
    let resp = f
        .app
        .clone()
        .oneshot(Request::get("/api/events").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();

    let (_, job) = call_json(&f.app, "POST", "/api/train", None).await;
    let mut text = String::new();
    while !text.contains("event: job-done") {
        let frame = tokio::time::timeout(Duration::from_secs(60), body.frame())
            .await
            .unwrap()
            .unwrap()
            .unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
    assert_eq!(text.matches("event: job-progress").count(), 3);
    assert!(text.contains(&format!("\"id\":{}", job["id"])));
}

#[tokio::test]
async fn reproject_and_local_projection_jobs() {
    let f = fixture(true);
    let keys = load_batch(&f, 4).await;
    let mut rx = f.state.subscribe();

    let (status, job) = call_json(&f.app, "POST", "/api/reproject", None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(job["kind"], "layout");
    let mut layout_updated = false;
    loop {
        let ev = next_event(&mut rx).await;
        if ev.kind == "layout-updated" {
            assert_eq!(ev.data["points"].as_array().unwrap().len(), keys.len());
            layout_updated = true;
        }
        if ev.kind == "job-done" {
            assert_eq!(ev.data["state"], "done");
            break;
        }
    }
    assert!(layout_updated);

    let subset: Vec<&String> = keys.iter().take(8).collect();
    let (_, job) = call_json(&f.app, "POST", "/api/reproject/local", Some(json!({ "keys": subset }))).await;
    assert_eq!(job["kind"], "reproject-local");
    let done = wait_job_done(&mut rx, job["id"].as_u64().unwrap()).await;
    let points = done["result"]["points"].as_array().unwrap();
    assert_eq!(points.len(), subset.len());
    for (p, k) in points.iter().zip(&subset) {
        assert_eq!(p["key"].as_str().unwrap(), k.as_str());
    }

    let (status, _) = call_json(
        &f.app,
        "POST",
        "/api/reproject/local",
        Some(json!({ "keys": ["00000000deadbeef"] })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn overlay_and_thumbnail_are_png() {
    let f = fixture(true);
    let (status, png) = call(&f.app, "GET", "/api/images/scene00/overlay", None).await;
    assert_eq!(status, StatusCode::OK);
    let decoded = image::load_from_memory(&png).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (24, 24));

    let (_, seg_list) = call_json(&f.app, "GET", "/api/images", None).await;
    assert_eq!(seg_list["images"].as_array().unwrap().len(), 4);

    let key = {
        let keys = load_batch(&f, 1).await;
        keys[0].clone()
    };
    let (status, _) = call(&f.app, "GET", &format!("/api/images/scene00/overlay?highlight={key}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, thumb) = call(
        &f.app,
        "GET",
        &format!("/api/images/scene00/overlay?highlight={key}&thumbnail=8"),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let t = image::load_from_memory(&thumb).unwrap();
    assert!(t.width().max(t.height()) <= 8);

    let (status, _) = call(&f.app, "GET", "/api/images/nope/overlay", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&f.app, "GET", "/api/images/scene00/overlay?highlight=zz", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn split_and_recut_report_changes() {
    let f = fixture(false);
    let (_, images) = call_json(&f.app, "GET", "/api/images", None).await;
    assert_eq!(images["images"][0]["id"], "scene00");

    // One big segment over the whole image, then split it with a click in each corner.
    let (status, recut) = call_json(
        &f.app,
        "POST",
        "/api/images/scene00/recut",
        Some(json!({ "criterion": "area", "threshold": 1e9, "request_id": "c1" })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{recut}");
    assert_eq!(recut["job"]["kind"], "recut");
    assert_eq!(recut["job"]["state"], "done");
    let added = recut["report"]["added"].as_array().unwrap();
    assert_eq!(added.len(), 1);
    let whole = added[0].as_str().unwrap().to_owned();

    let (_, seg) = call_json(&f.app, "GET", &format!("/api/segments/{whole}"), None).await;
    assert_eq!(seg["pixels"], 24 * 24);

    let split = json!({ "pos": [[0, 0]], "neg": [[23, 23]], "request_id": "s1" });
    let uri = format!("/api/segments/{whole}/split");
    let (status, body) = call_json(&f.app, "POST", &uri, Some(split.clone())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let (_, replay) = call_json(&f.app, "POST", &uri, Some(split)).await;
    assert_eq!(body, replay);
    let (_, images) = call_json(&f.app, "GET", "/api/images", None).await;
    assert_eq!(images["images"][0]["segments"], 2);

    let (status, _) = call_json(&f.app, "GET", &format!("/api/segments/{whole}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let pos = body["positive"].as_str().unwrap();
    let (status, _) = call_json(
        &f.app,
        "POST",
        &format!("/api/segments/{pos}/split"),
        Some(json!({ "pos": [[0, 0]], "neg": [[99, 0]] })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = call_json(
        &f.app,
        "POST",
        "/api/images/scene00/recut",
        Some(json!({ "criterion": "volume", "threshold": -1.0 })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn metrics_against_ground_truth_directory() {
    let f = fixture(true);
    let gt_dir = f.root.join("gt");
    let (status, body) = call_json(&f.app, "GET", &format!("/api/metrics?gt_dir={}", gt_dir.display()), None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let metrics = body["metrics"].as_array().unwrap();
    assert_eq!(metrics.len(), 3);
    for m in metrics {
        assert_eq!(m["per_image"].as_array().unwrap().len(), 4);
        assert!(m["mean"].as_f64().unwrap() > 0.5, "{m}");
    }
    let (_, one) = call_json(
        &f.app,
        "GET",
        &format!("/api/metrics?gt_dir={}&mode=agreement", gt_dir.display()),
        None,
    )
    .await;
    assert_eq!(one["metrics"].as_array().unwrap().len(), 1);
    assert_eq!(one["metrics"][0]["mode"], "agreement");

    let (status, _) = call_json(&f.app, "GET", "/api/metrics?gt_dir=/nonexistent", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn session_save_and_load_round_trip() {
    let f = fixture(true);
    load_batch(&f, 2).await;
    let (status, body) = call_json(&f.app, "POST", "/api/session", Some(json!({ "action": "save" }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let dir = PathBuf::from(body["dir"].as_str().unwrap());
    assert!(dir.join("session.json").exists());

    let before = call_json(&f.app, "GET", "/api/projection", None).await.1;
    load_batch(&f, 2).await;
    assert_ne!(before, call_json(&f.app, "GET", "/api/projection", None).await.1);
    let (status, _) = call_json(&f.app, "POST", "/api/session", Some(json!({ "action": "load" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before, call_json(&f.app, "GET", "/api/projection", None).await.1);

    let persisted = f.state.persist().await.unwrap();
    assert_eq!(persisted, Some(dir));
}
