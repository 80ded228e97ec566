use std::convert::Infallible;
use std::future::Future;
use std::path::PathBuf;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use segscape::correction::ClickSet;
use segscape::graph::{CutConfig, Criterion};
use segscape::session::{evaluate, CanvasRect, EvalMode, LabelMask, Session};
use segscape::SegmentKey;

use crate::jobs::JobKind;
use crate::{ApiError, AppState};

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/projection", get(projection))
        .route("/segments/{key}", get(segment))
        .route("/segments/{key}/split", post(split))
        .route("/segments/{key}/label", post(set_label))
        .route("/images", get(images))
        .route("/images/{id}/overlay", get(overlay))
        .route("/images/{id}/recut", post(recut))
        .route("/labels/box", post(box_label))
        .route("/palette", get(palette).post(add_palette))
        .route("/reproject", post(reproject))
        .route("/reproject/local", post(reproject_local))
        .route("/train", post(train))
        .route("/batch/next", post(next_batch))
        .route("/metrics", get(metrics))
        .route("/events", get(events))
        .route("/jobs/{id}", get(job))
        .route("/session", get(session_summary).post(session_io));
    Router::new().nest("/api", api).with_state(state)
}

fn parse_key(s: &str) -> ApiResult<SegmentKey> {
    s.parse()
        .map_err(|_| ApiError::bad_request(format!("malformed segment key '{s}'")))
}

/// Runs a mutation once per `(scope, request_id)`; replays get the stored response.
async fn idempotent<F, Fut>(state: &AppState, scope: String, request_id: Option<String>, f: F) -> Response
where
    F: FnOnce() -> Fut,
    Fut: Future<Output = ApiResult<(StatusCode, Value)>>,
{
    let Some(rid) = request_id else {
        return reply(f().await);
    };
    let cache_key = format!("{scope}#{rid}");
    let mut replies = state.inner.replies.lock().await;
    if let Some((status, body)) = replies.get(&cache_key) {
        return (*status, Json(body.clone())).into_response();
    }
    let (status, body) = match f().await {
        Ok(r) => r,
        Err(e) => (e.status, json!({ "error": e.message })),
    };
    replies.insert(cache_key, (status, body.clone()));
    (status, Json(body)).into_response()
}

fn reply(r: ApiResult<(StatusCode, Value)>) -> Response {
    match r {
        Ok((status, body)) => (status, Json(body)).into_response(),
        Err(e) => e.into_response(),
    }
}

fn projection_points(session: &Session) -> Vec<Value> {
    session
        .layout_points()
        .into_iter()
        .map(|p| {
            let seg = session.segment(p.key).unwrap();
            json!({
                "key": p.key,
                "x": p.x,
                "y": p.y,
                "label": seg.label,
                "image": seg.image_id,
            })
        })
        .collect()
}

async fn projection(State(state): State<AppState>) -> Json<Value> {
    let session = state.inner.session.read().await;
    Json(json!({ "points": projection_points(&session) }))
}

async fn segment(State(state): State<AppState>, Path(key): Path<String>) -> ApiResult<Json<Value>> {
    let key = parse_key(&key)?;
    let session = state.inner.session.read().await;
    let s = session
        .segment(key)
        .ok_or(segscape::Error::UnknownSegment(key))?;
    Ok(Json(json!({
        "key": s.key,
        "image": s.image_id,
        "bbox": s.bbox,
        "pixels": s.pixel_count(),
        "label": s.label,
        "coords": s.coords,
    })))
}

async fn images(State(state): State<AppState>) -> Json<Value> {
    let session = state.inner.session.read().await;
    Json(json!({ "images": session.images() }))
}

#[derive(Deserialize)]
struct OverlayQuery {
    highlight: Option<String>,
    /// When set with `highlight`, returns only that segment's crop scaled to this size.
    thumbnail: Option<usize>,
}

async fn overlay(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<OverlayQuery>,
) -> ApiResult<Response> {
    let highlight = q.highlight.as_deref().filter(|s| !s.is_empty()).map(parse_key).transpose()?;
    let session = state.inner.session.read().await;
    let png = match (highlight, q.thumbnail) {
        (Some(key), Some(size)) => {
            let seg = session.segment(key).ok_or(segscape::Error::UnknownSegment(key))?;
            if seg.image_id != id {
                return Err(ApiError::bad_request(format!("segment {key} is not in image {id}")));
            }
            session.thumbnail_png(key, size)?
        }
        (None, Some(_)) => return Err(ApiError::bad_request("thumbnail requires highlight")),
        (_, None) => session.overlay_png(&id, highlight)?,
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
struct BoxRequest {
    rect: CanvasRect,
    label: u32,
    request_id: Option<String>,
}

async fn box_label(State(state): State<AppState>, Json(req): Json<BoxRequest>) -> Response {
    idempotent(&state, "labels/box".into(), req.request_id.clone(), || async {
        let rect = CanvasRect::new(req.rect.x0, req.rect.y0, req.rect.x1, req.rect.y1);
        let count = state.inner.session.write().await.assign_label_box(rect, req.label)?;
        if count > 0 {
            state.emit("segments-changed", json!({ "reason": "label", "count": count }));
        }
        Ok((StatusCode::OK, json!({ "count": count })))
    })
    .await
}

#[derive(Deserialize)]
struct LabelRequest {
    label: Option<u32>,
    request_id: Option<String>,
}

async fn set_label(State(state): State<AppState>, Path(key): Path<String>, Json(req): Json<LabelRequest>) -> Response {
    let scope = format!("segments/{key}/label");
    idempotent(&state, scope, req.request_id.clone(), || async {
        let key = parse_key(&key)?;
        state.inner.session.write().await.set_label(key, req.label)?;
        state.emit("segments-changed", json!({ "reason": "label", "keys": [key] }));
        Ok((StatusCode::OK, json!({ "key": key, "label": req.label })))
    })
    .await
}

#[derive(Deserialize)]
struct SplitRequest {
    pos: Vec<[usize; 2]>,
    neg: Vec<[usize; 2]>,
    request_id: Option<String>,
}

async fn split(State(state): State<AppState>, Path(key): Path<String>, Json(req): Json<SplitRequest>) -> Response {
    let scope = format!("segments/{key}/split");
    idempotent(&state, scope, req.request_id.clone(), || async {
        let key = parse_key(&key)?;
        let mut session = state.inner.session.write().await;
        let image = session
            .segment(key)
            .ok_or(segscape::Error::UnknownSegment(key))?
            .image_id
            .clone();
        let (w, h) = {
            let p = session.partition(&image)?;
            (p.width(), p.height())
        };
        let to_index = |pts: &[[usize; 2]]| -> ApiResult<Vec<usize>> {
            pts.iter()
                .map(|&[x, y]| {
                    if x < w && y < h {
                        Ok(y * w + x)
                    } else {
                        Err(ApiError::bad_request(format!("click ({x}, {y}) outside {w}x{h} image")))
                    }
                })
                .collect()
        };
        let clicks = ClickSet {
            positive: to_index(&req.pos)?,
            negative: to_index(&req.neg)?,
        };
        let (pos, neg) = session.apply_split(key, &clicks)?;
        drop(session);
        state.emit(
            "segments-changed",
            json!({ "reason": "split", "image": image, "removed": [key], "added": [pos, neg] }),
        );
        Ok((StatusCode::OK, json!({ "image": image, "positive": pos, "negative": neg })))
    })
    .await
}

#[derive(Deserialize)]
struct RecutRequest {
    criterion: Criterion,
    threshold: f64,
    request_id: Option<String>,
}

async fn recut(State(state): State<AppState>, Path(id): Path<String>, Json(req): Json<RecutRequest>) -> Response {
    let scope = format!("images/{id}/recut");
    idempotent(&state, scope, req.request_id.clone(), || async {
        let cut = CutConfig::new(req.criterion, req.threshold)?;
        let job = state.create_job(JobKind::Recut);
        state.job_running(job.id);
        let report = state.inner.session.write().await.recut(&id, cut);
        match report {
            Ok(report) => {
                let result = serde_json::to_value(&report).unwrap();
                state.job_finish(job.id, Ok(result.clone()));
                if !report.is_unchanged() {
                    state.emit(
                        "segments-changed",
                        json!({ "reason": "recut", "image": id, "removed": report.removed, "added": report.added }),
                    );
                }
                Ok((StatusCode::OK, json!({ "job": state.job(job.id), "report": result })))
            }
            Err(e) => {
                state.job_finish(job.id, Err(e.to_string()));
                Err(e.into())
            }
        }
    })
    .await
}

async fn palette(State(state): State<AppState>) -> Json<Value> {
    let session = state.inner.session.read().await;
    Json(json!({ "palette": session.palette() }))
}

#[derive(Deserialize)]
struct PaletteRequest {
    name: String,
    color: Option<[u8; 3]>,
    request_id: Option<String>,
}

async fn add_palette(State(state): State<AppState>, Json(req): Json<PaletteRequest>) -> Response {
    idempotent(&state, "palette".into(), req.request_id.clone(), || async {
        let mut session = state.inner.session.write().await;
        let next = session.palette().iter().map(|p| p.id).max().unwrap_or(0) + 1;
        let color = req.color.unwrap_or_else(|| segscape::session::default_color(next));
        let id = session.add_label(&req.name, color)?;
        Ok((StatusCode::OK, json!({ "id": id, "name": req.name, "color": color })))
    })
    .await
}

#[derive(Deserialize, Default)]
struct JobRequest {
    request_id: Option<String>,
}

async fn train(State(state): State<AppState>, body: Option<Json<JobRequest>>) -> Response {
    let req = body.map(|b| b.0).unwrap_or_default();
    idempotent(&state, "train".into(), req.request_id, || async {
        let job = state.create_job(JobKind::Train);
        let st = state.clone();
        tokio::spawn(async move {
            let _compute = st.inner.compute.lock().await;
            st.job_running(job.id);
            let snapshot = st.inner.session.read().await.train_job();
            let epochs = snapshot.config.epochs;
            let cb_state = st.clone();
            let run = tokio::task::spawn_blocking(move || {
                snapshot.run(|epoch, loss| {
                    cb_state.job_progress(
                        job.id,
                        epoch as f64 / epochs as f64,
                        json!({ "epoch": epoch, "loss": loss }),
                    )
                })
            })
            .await;
            let outcome = match run {
                Ok(Ok((head, losses))) => st
                    .inner
                    .session
                    .write()
                    .await
                    .commit_head(head, &losses)
                    .map(|_| json!({ "losses": losses }))
                    .map_err(|e| e.to_string()),
                Ok(Err(e)) => Err(e.to_string()),
                Err(e) => Err(format!("training task panicked: {e}")),
            };
            st.job_finish(job.id, outcome);
        });
        Ok((StatusCode::ACCEPTED, serde_json::to_value(&job).unwrap()))
    })
    .await
}

async fn reproject(State(state): State<AppState>, body: Option<Json<JobRequest>>) -> Response {
    let req = body.map(|b| b.0).unwrap_or_default();
    idempotent(&state, "reproject".into(), req.request_id, || async {
        let job = state.create_job(JobKind::Layout);
        let st = state.clone();
        tokio::spawn(async move {
            let _compute = st.inner.compute.lock().await;
            st.job_running(job.id);
            let inner = st.clone();
            let run = tokio::task::spawn_blocking(move || {
                let mut session = inner.inner.session.blocking_write();
                session.reproject().map(|_| projection_points(&session))
            })
            .await;
            let outcome = match run {
                Ok(Ok(points)) => {
                    st.emit("layout-updated", json!({ "points": points }));
                    Ok(json!({ "points": points.len() }))
                }
                Ok(Err(e)) => Err(e.to_string()),
                Err(e) => Err(format!("layout task panicked: {e}")),
            };
            st.job_finish(job.id, outcome);
        });
        Ok((StatusCode::ACCEPTED, serde_json::to_value(&job).unwrap()))
    })
    .await
}

#[derive(Deserialize)]
struct LocalRequest {
    keys: Vec<SegmentKey>,
    request_id: Option<String>,
}

async fn reproject_local(State(state): State<AppState>, Json(req): Json<LocalRequest>) -> Response {
    idempotent(&state, "reproject/local".into(), req.request_id.clone(), || async {
        {
            let session = state.inner.session.read().await;
            if let Some(k) = req.keys.iter().find(|k| session.segment(**k).is_none()) {
                return Err(segscape::Error::UnknownSegment(*k).into());
            }
        }
        let job = state.create_job(JobKind::ReprojectLocal);
        let st = state.clone();
        let keys = req.keys.clone();
        tokio::spawn(async move {
            st.job_running(job.id);
            let inner = st.clone();
            let run = tokio::task::spawn_blocking(move || inner.inner.session.blocking_read().local_projection(&keys)).await;
            let outcome = match run {
                Ok(Ok(points)) => Ok(json!({ "points": points })),
                Ok(Err(e)) => Err(e.to_string()),
                Err(e) => Err(format!("local projection task panicked: {e}")),
            };
            st.job_finish(job.id, outcome);
        });
        Ok((StatusCode::ACCEPTED, serde_json::to_value(&job).unwrap()))
    })
    .await
}

#[derive(Deserialize)]
struct BatchRequest {
    n: usize,
    request_id: Option<String>,
}

async fn next_batch(State(state): State<AppState>, Json(req): Json<BatchRequest>) -> Response {
    idempotent(&state, "batch/next".into(), req.request_id.clone(), || async {
        let mut session = state.inner.session.write().await;
        let keys = session.next_batch(req.n)?;
        let points = projection_points(&session);
        drop(session);
        if !keys.is_empty() {
            state.emit("layout-updated", json!({ "points": points }));
        }
        Ok((StatusCode::OK, json!({ "keys": keys })))
    })
    .await
}

#[derive(Deserialize)]
struct MetricsQuery {
    gt_dir: PathBuf,
    mode: Option<EvalMode>,
}

async fn metrics(State(state): State<AppState>, Query(q): Query<MetricsQuery>) -> ApiResult<Json<Value>> {
    let session = state.inner.session.read().await;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for mask in session.label_masks() {
        let path = q.gt_dir.join(format!("{}.png", mask.image_id));
        if path.is_file() {
            gts.push(LabelMask::load_png(&path, mask.image_id.clone())?);
            preds.push(mask);
        }
    }
    drop(session);
    if gts.is_empty() {
        return Err(ApiError::bad_request(format!(
            "no ground-truth masks for session images in {}",
            q.gt_dir.display()
        )));
    }
    let modes: Vec<EvalMode> = match q.mode {
        Some(m) => vec![m],
        None => EvalMode::ALL.to_vec(),
    };
    let results = modes
        .into_iter()
        .map(|m| evaluate(&preds, &gts, m))
        .collect::<segscape::Result<Vec<_>>>()?;
    Ok(Json(json!({ "metrics": results })))
}

async fn events(State(state): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let event = Event::default().event(ev.kind).data(ev.data.to_string());
                    return Some((Ok(event), rx));
                }
                Err(RecvError::Lagged(n)) => log::warn!("event stream subscriber lagged by {n} events"),
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn job(State(state): State<AppState>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    let job = state
        .job(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))?;
    Ok(Json(serde_json::to_value(&job).unwrap()))
}

async fn session_summary(State(state): State<AppState>) -> Json<Value> {
    let dir = state.inner.session_dir.lock().await.clone();
    let session = state.inner.session.read().await;
    Json(json!({
        "dir": dir,
        "images": session.image_ids(),
        "segments": session.segment_count(),
        "shown": session.shown_keys().len(),
        "labeled": session.segments().filter(|s| s.label.is_some()).count(),
        "batch_cursor": session.batch_cursor(),
        "feature_dimension": session.feature_dimension(),
        "palette": session.palette(),
        "events": session.events().len(),
    }))
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum SessionAction {
    Save,
    Load,
}

#[derive(Deserialize)]
struct SessionRequest {
    action: SessionAction,
    dir: Option<PathBuf>,
    request_id: Option<String>,
}

async fn session_io(State(state): State<AppState>, Json(req): Json<SessionRequest>) -> Response {
    idempotent(&state, "session".into(), req.request_id.clone(), || async {
        let mut current = state.inner.session_dir.lock().await;
        let dir = req
            .dir
            .clone()
            .or_else(|| current.clone())
            .ok_or_else(|| ApiError::bad_request("no session directory given or configured"))?;
        match req.action {
            SessionAction::Save => state.inner.session.read().await.save(&dir)?,
            SessionAction::Load => {
                let loaded = Session::load(&dir)?;
                *state.inner.session.write().await = loaded;
                let points = projection_points(&*state.inner.session.read().await);
                state.emit("layout-updated", json!({ "points": points }));
                state.emit("segments-changed", json!({ "reason": "load" }));
            }
        }
        *current = Some(dir.clone());
        Ok((StatusCode::OK, json!({ "dir": dir })))
    })
    .await
}
