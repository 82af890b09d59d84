use std::time::Duration;

use axum::body::Body;
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use fishgrade_core::image::{encode_png16, ChannelMap};
use fishgrade_core::report::SlideReport;
use fishgrade_core::scoring::{AmplificationStatus, ScoringConfig};
use fishgrade_core::simulator::{simulate_slide, SimConfig};
use fishgrade_service::{app, ServiceConfig, BOXES_HEADER, SCHEMA_HEADER};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn slide_png(seed: u64) -> Vec<u8> {
    let (img, _) = simulate_slide(&SimConfig::noiseless(), seed).unwrap();
    encode_png16(&img, ChannelMap::default()).unwrap()
}

struct Reply {
    status: StatusCode,
    headers: HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }
    fn report(&self) -> SlideReport {
        SlideReport::from_json(std::str::from_utf8(&self.body).unwrap()).unwrap()
    }
}

async fn send(app: &Router, method: Method, uri: &str, body: impl Into<Body>, headers: &[(&str, &str)]) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let res = app.clone().oneshot(req.body(body.into()).unwrap()).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Method::GET, uri, Body::empty(), &[]).await
}

async fn patch(app: &Router, uri: &str, body: Value) -> Reply {
    send(app, Method::PATCH, uri, body.to_string(), &[("content-type", "application/json")]).await
}

async fn upload(app: &Router, png: Vec<u8>) -> String {
    let r = send(app, Method::POST, "/slides", png, &[("content-type", "image/png")]).await;
    assert!(r.status == StatusCode::ACCEPTED || r.status == StatusCode::OK, "{:?}", r.status);
    r.json()["id"].as_str().unwrap().to_string()
}

async fn wait_ready(app: &Router, id: &str) -> SlideReport {
    for _ in 0..1200 {
        let r = get(app, &format!("/slides/{id}/report")).await;
        match r.status {
            StatusCode::OK => return r.report(),
            StatusCode::ACCEPTED => tokio::time::sleep(Duration::from_millis(50)).await,
            other => panic!("unexpected {other}: {}", String::from_utf8_lossy(&r.body)),
        }
    }
    panic!("slide {id} never became ready");
}

fn memory_app() -> Router {
    app(ServiceConfig::default()).unwrap()
}

#[tokio::test]
async fn healthz_and_schema_header() {
    let app = memory_app();
    let r = get(&app, "/healthz").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body, b"ok");
    assert_eq!(r.headers[SCHEMA_HEADER], "fishgrade/1");
    let r = get(&app, "/slides/nope/report").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.headers[SCHEMA_HEADER], "fishgrade/1");
}

#[tokio::test]
async fn upload_is_idempotent_and_rejects_garbage() {
    let app = memory_app();
    let png = slide_png(1);
    let first = send(&app, Method::POST, "/slides", png.clone(), &[]).await;
    assert_eq!(first.status, StatusCode::ACCEPTED);
    let id = first.json()["id"].as_str().unwrap().to_string();
    assert_eq!(id, fishgrade_service::store::content_id(&png));
    let second = send(&app, Method::POST, "/slides", png.clone(), &[]).await;
    assert_eq!(second.status, StatusCode::OK);
    assert_eq!(second.json()["id"], id.as_str());

    let truncated = send(&app, Method::POST, "/slides", png[..png.len() / 2].to_vec(), &[]).await;
    assert_eq!(truncated.status, StatusCode::BAD_REQUEST);
    assert_eq!(send(&app, Method::POST, "/slides", Vec::<u8>::new(), &[]).await.status, StatusCode::BAD_REQUEST);
    wait_ready(&app, &id).await;
}

#[tokio::test]
async fn json_upload_carries_a_config() {
    use base64::Engine;
    let app = memory_app();
    let png = slide_png(2);
    let mut config = fishgrade_core::pipeline::PipelineConfig::default();
    config.scoring.ratio_threshold = 2.5;
    let body = json!({ "image": base64::engine::general_purpose::STANDARD.encode(&png), "config": config });
    let r = send(&app, Method::POST, "/slides", body.to_string(), &[("content-type", "application/json")]).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let report = wait_ready(&app, r.json()["id"].as_str().unwrap()).await;
    assert_eq!(report.config.scoring.ratio_threshold, 2.5);
    let bad = send(&app, Method::POST, "/slides", "{\"image\": \"***\"}", &[("content-type", "application/json")]).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn processing_reports_progress() {
    let app = memory_app();
    // a large slide keeps the session busy long enough to observe
    let sim = SimConfig { width: 4000, height: 3000, nuclei: (150, 160), ..SimConfig::noiseless() };
    let (img, _) = simulate_slide(&sim, 3).unwrap();
    let id = upload(&app, encode_png16(&img, ChannelMap::default()).unwrap()).await;
    let r = get(&app, &format!("/slides/{id}/report")).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let p = r.json()["progress"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let s = get(&app, &format!("/slides/{id}")).await;
    assert_eq!(s.json()["state"], "processing");
    let overlay = get(&app, &format!("/slides/{id}/overlay")).await;
    assert_eq!(overlay.status, StatusCode::CONFLICT);
    wait_ready(&app, &id).await;
}

#[tokio::test]
async fn overrides_regrade_and_round_trip() {
    let app = memory_app();
    let id = upload(&app, slide_png(4)).await;
    let base = wait_ready(&app, &id).await;
    let nid = base.nuclei.iter().find(|n| n.score.evaluable).unwrap().id;
    let uri = format!("/slides/{id}/nuclei/{nid}");

    let r = patch(&app, &uri, json!({ "action": "exclude" })).await;
    assert_eq!(r.status, StatusCode::OK);
    let excluded = r.report();
    assert_eq!(excluded.status.evaluable_count, base.status.evaluable_count - 1);
    assert_eq!(excluded.nuclei[nid].classifier, base.nuclei[nid].classifier);

    let restored = patch(&app, &uri, json!({ "action": "include" })).await.report();
    assert_eq!(restored.status, base.status);

    let r = patch(&app, &uri, json!({ "action": "set_class", "class": "Artifact" })).await.report();
    assert!(!r.nuclei[nid].score.evaluable);
    assert_eq!(r.review_log.len(), 3);

    assert_eq!(patch(&app, &uri, json!({ "action": "set_class", "class": "Mitotic" })).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(patch(&app, &uri, json!({ "action": "delete" })).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(patch(&app, &format!("/slides/{id}/nuclei/9999"), json!({ "action": "exclude" })).await.status, StatusCode::NOT_FOUND);
    assert_eq!(patch(&app, "/slides/beef/nuclei/0", json!({ "action": "exclude" })).await.status, StatusCode::NOT_FOUND);
    // rejected requests leave no log entries
    assert_eq!(wait_ready(&app, &id).await.review_log.len(), 3);
}

#[tokio::test]
async fn config_updates_only_regrade() {
    let app = memory_app();
    let id = upload(&app, slide_png(9)).await;
    let base = wait_ready(&app, &id).await;
    let put = |s: &ScoringConfig| {
        let body = serde_json::to_string(s).unwrap();
        let app = app.clone();
        let uri = format!("/slides/{id}/config");
        async move { send(&app, Method::PUT, &uri, body, &[("content-type", "application/json")]).await }
    };
    assert!(base.status.evaluable_count >= base.config.scoring.min_evaluable_nuclei, "{:?}", base.status);
    let same = put(&base.config.scoring).await.report();
    assert_eq!(same.status, base.status);
    assert_eq!(same.nuclei.iter().map(|n| &n.signals).collect::<Vec<_>>(), base.nuclei.iter().map(|n| &n.signals).collect::<Vec<_>>());

    let mut above = base.config.scoring.clone();
    above.ratio_threshold = base.status.mean_ratio.unwrap() + 0.01;
    let flipped = put(&above).await.report();
    assert_eq!(flipped.status.status, AmplificationStatus::Negative);
    assert_eq!(flipped.config.scoring, above);

    let bad = send(&app, Method::PUT, &format!("/slides/{id}/config"), "{\"ratio_threshold\": -1}", &[]).await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);
    let junk = send(&app, Method::PUT, &format!("/slides/{id}/config"), "not json", &[]).await;
    assert_eq!(junk.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn overlays() {
    let app = memory_app();
    let id = upload(&app, slide_png(6)).await;
    let report = wait_ready(&app, &id).await;
    let nuclei = get(&app, &format!("/slides/{id}/overlay?layer=nuclei")).await;
    assert_eq!(nuclei.status, StatusCode::OK);
    assert_eq!(nuclei.headers[header::CONTENT_TYPE], "image/png");
    assert_eq!(&nuclei.body[1..4], b"PNG");
    let signals = get(&app, &format!("/slides/{id}/overlay?layer=signals")).await;
    assert_eq!(signals.headers[BOXES_HEADER].to_str().unwrap().parse::<usize>().unwrap(), report.signal_count());
    let cam = get(&app, &format!("/slides/{id}/overlay?layer=cam&nucleus=0")).await;
    assert_eq!(cam.status, StatusCode::NOT_FOUND);
    assert!(cam.json()["error"].as_str().unwrap().contains("reference classifier"));
    assert_eq!(get(&app, &format!("/slides/{id}/overlay?layer=bogus")).await.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn bearer_token_guards_everything_but_healthz() {
    let app = app(ServiceConfig { token: Some("s3cret".into()), ..Default::default() }).unwrap();
    assert_eq!(get(&app, "/healthz").await.status, StatusCode::OK);
    assert_eq!(get(&app, "/slides/x/report").await.status, StatusCode::UNAUTHORIZED);
    let wrong = send(&app, Method::GET, "/slides/x/report", Body::empty(), &[("authorization", "Bearer nope")]).await;
    assert_eq!(wrong.status, StatusCode::UNAUTHORIZED);
    let right = send(&app, Method::GET, "/slides/x/report", Body::empty(), &[("authorization", "Bearer s3cret")]).await;
    assert_eq!(right.status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_overrides_are_serialized() {
    let app = memory_app();
    let id = upload(&app, slide_png(7)).await;
    let base = wait_ready(&app, &id).await;
    let ids: Vec<usize> = base.nuclei.iter().filter(|n| n.score.evaluable).take(6).map(|n| n.id).collect();
    let tasks: Vec<_> = ids
        .iter()
        .map(|nid| {
            let (app, uri) = (app.clone(), format!("/slides/{id}/nuclei/{nid}"));
            tokio::spawn(async move { patch(&app, &uri, json!({ "action": "exclude" })).await.report() })
        })
        .collect();
    let mut acked = Vec::new();
    for t in tasks {
        acked.push(t.await.unwrap());
    }
    // every response reflects exactly the events acknowledged before it
    for r in &acked {
        let n = r.review_log.len();
        assert_eq!(r.status.evaluable_count, base.status.evaluable_count - n);
    }
    let last = wait_ready(&app, &id).await;
    let seqs: Vec<u64> = last.review_log.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=ids.len() as u64).collect::<Vec<_>>());
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig { data_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let first = app(cfg.clone()).unwrap();
    let id = upload(&first, slide_png(8)).await;
    let base = wait_ready(&first, &id).await;
    let nid = base.nuclei.iter().find(|n| n.score.evaluable).unwrap().id;
    patch(&first, &format!("/slides/{id}/nuclei/{nid}"), json!({ "action": "exclude" })).await;
    let mut scoring = base.config.scoring.clone();
    scoring.high_amp_mean_her2_copies = 5.0;
    let before = send(&first, Method::PUT, &format!("/slides/{id}/config"), serde_json::to_string(&scoring).unwrap(), &[])
        .await
        .report();
    drop(first);

    let second = app(cfg).unwrap();
    let mut after = wait_ready(&second, &id).await;
    assert_eq!(after.review_log, before.review_log);
    after.created_at = before.created_at.clone();
    assert_eq!(after, before);
}
