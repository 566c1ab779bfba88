mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use feedloop_service::api::{router, ApiState};
use feedloop_service::Config;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const EXPORT: &[u8] = include_bytes!("fixtures/export_small.json");

async fn call_raw(app: &Router, method: Method, uri: &str, body: Body, token: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = req.header(header::CONTENT_TYPE, "application/json").body(body).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let body = body.map_or(Body::empty(), |b| Body::from(b.to_string()));
    let (status, bytes) = call_raw(app, method, uri, body, None).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn app(config: Config) -> Router {
    router(ApiState::ready(Arc::new(common::memory_engine(config))))
}

async fn bootstrapped(config: Config) -> Router {
    let app = app(config);
    let (s, v) = call_raw(&app, Method::POST, "/admin/import-gold", Body::from(common::gold_jsonl("seed", 120)), None).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&v));
    let (s, trained) = call(&app, Method::POST, "/admin/train", None).await;
    assert_eq!(s, StatusCode::OK, "{trained}");
    let id = trained["version_id"].as_str().unwrap().to_string();
    let (s, promoted) = call(
        &app,
        Method::POST,
        &format!("/admin/versions/{id}/promote"),
        Some(json!({"actor": "ana", "rationale": "first model"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{promoted}");
    assert_eq!(promoted["deployed"], true);
    let (s, _) = call_raw(&app, Method::POST, "/ingest?channel=sample", Body::from(EXPORT), None).await;
    assert_eq!(s, StatusCode::OK);
    app
}

#[tokio::test]
async fn health_and_readiness() {
    let pending = ApiState::pending(None);
    let app = router(pending.clone());
    assert_eq!(call(&app, Method::GET, "/health", None).await.0, StatusCode::OK);
    let (s, body) = call(&app, Method::GET, "/ready", None).await;
    assert_eq!((s, body["error"].as_str()), (StatusCode::SERVICE_UNAVAILABLE, Some("NotReady")));
    assert_eq!(call(&app, Method::GET, "/feed", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    pending.set_engine(Arc::new(common::memory_engine(Config::default())));
    assert_eq!(call(&app, Method::GET, "/ready", None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn empty_deployment_serves_an_empty_feed() {
    let app = app(Config::default());
    let (s, body) = call(&app, Method::GET, "/feed", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["total"], 0);
    assert_eq!(body["items"], json!([]));
}

#[tokio::test]
async fn feedback_on_an_unknown_message_is_404() {
    let app = app(Config::default());
    let (s, body) = call(
        &app,
        Method::POST,
        "/feedback",
        Some(json!({"user_id": "u1", "channel_id": "nope", "message_id": 7, "kind": "AGREE", "displayed_version": null})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "UnknownMessage");
}

#[tokio::test]
async fn ingest_feed_and_feedback() {
    let app = bootstrapped(Config::default()).await;
    let (s, feed) = call(&app, Method::GET, "/feed?channels=sample&page_size=10", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(feed["total"], 5);
    let items = feed["items"].as_array().unwrap();
    let media = items.iter().find(|i| i["message"]["message_id"] == 4).unwrap();
    assert!(media["classification"].is_null());
    let moon = items.iter().find(|i| i["message"]["message_id"] == 1).unwrap();
    assert_eq!(moon["classification"]["pathway"], "FT");

    let (s, found) = call(&app, Method::GET, "/feed?q=chemtrails&channels=sample", None).await;
    assert_eq!((s, found["total"].as_u64()), (StatusCode::OK, Some(1)));
    assert_eq!(call(&app, Method::GET, "/feed?page_size=0", None).await.0, StatusCode::BAD_REQUEST);

    let vote = |user: &str, kind: &str, label: Option<&str>| {
        json!({"user_id": user, "channel_id": "sample", "message_id": 5, "kind": kind, "label": label})
    };
    let (s, out) = call(&app, Method::POST, "/feedback", Some(vote("u1", "RELABEL", Some("CT")))).await;
    assert_eq!(s, StatusCode::OK, "{out}");
    let (s, _) = call(&app, Method::POST, "/feedback", Some(vote("u2", "RELABEL", Some("NOT_CT")))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, conflicts) = call(&app, Method::GET, "/conflicts", None).await;
    let conflicts = conflicts.as_array().unwrap();
    assert_eq!(conflicts.len(), 1);
    let id = conflicts[0]["conflict_id"].as_u64().unwrap();

    let (s, gold) =
        call(&app, Method::POST, &format!("/conflicts/{id}/resolve"), Some(json!({"label": "CT", "resolver_id": "lead"}))).await;
    assert_eq!(s, StatusCode::OK, "{gold}");
    assert_eq!(gold["label"], "CT");
    let (s, again) =
        call(&app, Method::POST, &format!("/conflicts/{id}/resolve"), Some(json!({"label": "CT", "resolver_id": "lead"}))).await;
    assert_eq!((s, again["error"].as_str()), (StatusCode::CONFLICT, Some("AlreadyResolved")));
    assert_eq!(
        call(&app, Method::POST, "/conflicts/99/resolve", Some(json!({"label": "CT", "resolver_id": "x"}))).await.0,
        StatusCode::NOT_FOUND
    );
    let (_, all) = call(&app, Method::GET, "/conflicts?status=all", None).await;
    assert_eq!(all.as_array().unwrap().len(), 1);

    let implicit = json!([{"user_id": "u1", "channel_id": "sample", "message_id": 1, "kind": "CLICK"}]);
    let (s, body) = call(&app, Method::POST, "/events/implicit", Some(implicit)).await;
    assert_eq!((s, body["error"].as_str()), (StatusCode::FORBIDDEN, Some("ImplicitTrackingDisabled")));

    let (s, metrics) = call(&app, Method::GET, "/metrics", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(metrics["messages"], 125);
    assert_eq!(metrics["feedback"]["explicit"], 2);
    assert_eq!(metrics["conflicts_total"], 1);
}

#[tokio::test]
async fn implicit_events_when_enabled() {
    let mut config = Config::default();
    config.privacy.implicit_tracking = true;
    let app = bootstrapped(config).await;
    let events = json!([
        {"user_id": "u1", "channel_id": "sample", "message_id": 1, "kind": "DWELL", "dwell_seconds": 40.0},
        {"user_id": "u1", "channel_id": "sample", "message_id": 2, "kind": "SCROLL_PAST"}
    ]);
    let (s, out) = call(&app, Method::POST, "/events/implicit", Some(events)).await;
    assert_eq!(s, StatusCode::OK, "{out}");
    assert_eq!(out["event_ids"].as_array().unwrap().len(), 2);
    let bad = json!([{"user_id": "u1", "channel_id": "sample", "message_id": 1, "kind": "DWELL"}]);
    assert_eq!(call(&app, Method::POST, "/events/implicit", Some(bad)).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn snapshots_export_and_drift() {
    let app = bootstrapped(Config::default()).await;
    let (s, snap) = call(&app, Method::POST, "/admin/snapshot", None).await;
    assert_eq!(s, StatusCode::OK);
    let id = snap["snapshot_id"].as_str().unwrap();
    let (s, bytes) =
        call_raw(&app, Method::GET, &format!("/admin/snapshots/{id}/export?split=TRAIN"), Body::empty(), None).await;
    assert_eq!(s, StatusCode::OK);
    let lines: Vec<Value> =
        String::from_utf8(bytes).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len() as u64, (snap["counts"]["train"]["ct"].as_u64().unwrap() + snap["counts"]["train"]["not_ct"].as_u64().unwrap()));
    assert!(lines.iter().all(|l| l["split"] == "TRAIN"));
    assert_eq!(call(&app, Method::GET, "/admin/snapshots/nope/export", None).await.0, StatusCode::NOT_FOUND);

    let (s, drift) = call(&app, Method::POST, "/admin/drift-check", None).await;
    assert_eq!(s, StatusCode::OK, "{drift}");
    assert!(drift["report"]["jsd"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn lifecycle_endpoints() {
    let app = bootstrapped(Config::default()).await;
    let (_, versions) = call(&app, Method::GET, "/admin/versions", None).await;
    let v1 = versions[0]["version_id"].as_str().unwrap().to_string();
    assert_eq!(versions[0]["status"], "DEPLOYED");

    let (s, body) = call(&app, Method::POST, &format!("/admin/versions/{v1}/evaluate"), Some(json!({"split": "TEST"}))).await;
    assert_eq!((s, body["error"].as_str()), (StatusCode::BAD_REQUEST, Some("TestSplitReserved")));
    let (s, eval) = call(&app, Method::POST, &format!("/admin/versions/{v1}/evaluate"), None).await;
    assert_eq!(s, StatusCode::OK, "{eval}");
    assert_eq!(eval["split"], "VALIDATION");
    assert_eq!(call(&app, Method::GET, "/admin/versions/FT-404", None).await.0, StatusCode::NOT_FOUND);

    let (_, trained) = call(&app, Method::POST, "/admin/train", None).await;
    let v2 = trained["version_id"].as_str().unwrap().to_string();
    let gate = json!({"actor": "ana", "rationale": "gate only", "deploy": false});
    let (s, gated) = call(&app, Method::POST, &format!("/admin/versions/{v2}/promote"), Some(gate)).await;
    assert_eq!(s, StatusCode::OK, "{gated}");
    assert_eq!((gated["deployed"].as_bool(), gated["test"].is_null()), (Some(false), true));
    let start = json!({"variant_b": v2, "fraction_b": 0.5, "actor": "ana", "rationale": "compare"});
    let (s, policy) = call(&app, Method::POST, "/admin/rollout", Some(start.clone())).await;
    assert_eq!(s, StatusCode::OK, "{policy}");
    assert_eq!(policy["variant_a"], v1.as_str());
    assert_eq!(call(&app, Method::POST, "/admin/rollout", Some(start)).await.0, StatusCode::CONFLICT);
    let (s, policy) = call(&app, Method::PATCH, "/admin/rollout", Some(json!({"fraction_b": 0.25, "actor": "ana"}))).await;
    assert_eq!((s, policy["fraction_b"].as_f64()), (StatusCode::OK, Some(0.25)));
    let (_, feed) = call(&app, Method::GET, "/feed?channels=sample&user=u7", None).await;
    let arms: Vec<&str> =
        feed["items"].as_array().unwrap().iter().filter_map(|i| i["classification"]["version_id"].as_str()).collect();
    assert!(arms.iter().all(|a| *a == v1 || *a == v2));
    let (s, _) = call(&app, Method::POST, "/admin/rollout/end", Some(json!({"actor": "ana", "rationale": "done"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(call(&app, Method::GET, "/admin/rollout", None).await.1, Value::Null);

    let (s, retired) =
        call(&app, Method::POST, &format!("/admin/versions/{v2}/retire"), Some(json!({"actor": "ana", "rationale": "unused"}))).await;
    assert_eq!(s, StatusCode::OK, "{retired}");

    let hotfix = json!({
        "template": {"template_text": "Is this a conspiracy theory? {message}", "k_shot": 0,
                     "selection_strategy": "RANDOM_SEEDED", "selection_seed": 0},
        "mode": "HOTFIX", "actor": "ana", "rationale": "urgent wording fix"
    });
    let (s, out) = call(&app, Method::POST, "/admin/prompts", Some(hotfix)).await;
    assert_eq!(s, StatusCode::OK, "{out}");
    assert!(out["review_after"].is_i64());
    let (_, record) = call(&app, Method::GET, &format!("/admin/versions/{}", out["version_id"].as_str().unwrap()), None).await;
    assert_eq!(record["status"], "DEPLOYED");
    assert_eq!(record["monitoring_pending"], true);

    let exp = json!({"k_values": [0], "strategies": ["RANDOM_SEEDED"], "seed": 1, "template_text": "{message}"});
    let (s, body) = call(&app, Method::POST, "/admin/experiment", Some(exp)).await;
    assert_eq!((s, body["error"].as_str()), (StatusCode::SERVICE_UNAVAILABLE, Some("ClientRequired")));

    let (s, digest) = call(&app, Method::GET, "/admin/digest", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(digest["digest"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn review_queue_and_rating_task() {
    let mut config = Config::default();
    config.lifecycle.review_threshold = 1.0;
    let app = bootstrapped(config).await;
    let (s, queue) = call(&app, Method::GET, "/review-queue?limit=3", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(queue.as_array().unwrap().len(), 3);
    let req = json!({"n": 3, "from": 0, "to": 2_000_000_000, "seed": 9});
    let (s, a) = call(&app, Method::POST, "/rating-task", Some(req.clone())).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    assert_eq!(a.as_array().unwrap().len(), 3);
    assert_eq!(call(&app, Method::POST, "/rating-task", Some(req)).await.1, a);
}

#[tokio::test]
async fn bearer_token_guards_everything_but_probes() {
    let mut config = Config::default();
    config.server.bearer_token = Some("s3cret".into());
    let app = app(config);
    assert_eq!(call(&app, Method::GET, "/health", None).await.0, StatusCode::OK);
    assert_eq!(call(&app, Method::GET, "/ready", None).await.0, StatusCode::OK);
    let (s, body) = call(&app, Method::GET, "/feed", None).await;
    assert_eq!((s, body["error"].as_str()), (StatusCode::UNAUTHORIZED, Some("Unauthorized")));
    assert_eq!(call_raw(&app, Method::GET, "/feed", Body::empty(), Some("wrong")).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(call_raw(&app, Method::GET, "/feed", Body::empty(), Some("s3cret")).await.0, StatusCode::OK);
}

#[tokio::test]
async fn malformed_export_is_rejected() {
    let app = app(Config::default());
    let (s, body) = call_raw(&app, Method::POST, "/ingest?channel=x", Body::from("{\"nope\": 1}"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let body: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(body["error"], "MalformedExport");
}
