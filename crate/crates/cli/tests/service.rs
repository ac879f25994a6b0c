mod common;

use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use bpurf_cli::service::{router, ServiceState};
use bpurf_core::geometry::{Point, Rect};
use bpurf_core::prompt::BoundaryPrompt;
use common::*;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn state() -> Arc<ServiceState> {
    static S: OnceLock<Arc<ServiceState>> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let b = build(7, 10, dir.path());
        Arc::new(ServiceState::new(b.model, b.bundle, b.heads).unwrap())
    })
    .clone()
}

/// A state no other test touches, for checks on counters and the session.
fn private_state() -> Arc<ServiceState> {
    let s = state();
    Arc::new(ServiceState::new(s.model.clone(), s.bundle.clone(), s.heads.clone()).unwrap())
}

fn app(st: Arc<ServiceState>) -> Router {
    router(st, None).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

async fn post(app: &Router, uri: &str, body: &Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, _, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, _, b) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn bbox() -> Rect {
    state().bundle.graph.bbox().unwrap()
}

fn rect_json(r: Rect) -> Value {
    BoundaryPrompt::rect(r).unwrap().to_geojson()
}

fn sub_rect(fx0: f64, fy0: f64, fx1: f64, fy1: f64) -> Rect {
    let b = bbox();
    Rect::new(
        b.min_x + fx0 * b.width(),
        b.min_y + fy0 * b.height(),
        b.min_x + fx1 * b.width(),
        b.min_y + fy1 * b.height(),
    )
}

fn outside() -> Rect {
    let b = bbox();
    Rect::new(b.max_x + 10.0, b.max_y + 10.0, b.max_x + 20.0, b.max_y + 20.0)
}

#[tokio::test]
async fn full_extent_counts_every_spatial_token() {
    let st = state();
    let b = bbox();
    let whole = Rect::new(b.min_x - 1.0, b.min_y - 1.0, b.max_x + 1.0, b.max_y + 1.0);
    let (s, v) = post(&app(st.clone()), "/v1/embed", &json!({"boundaries": [rect_json(whole)]})).await;
    assert_eq!(s, StatusCode::OK);
    let counts = v["token_counts"][0].as_object().unwrap();
    let total: u64 = counts.values().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(total as usize, st.bundle.graph.spatial_count());
    assert_eq!(v["dim"], 16);
    assert_eq!(v["embeddings"][0].as_array().unwrap().len(), 16);
    assert!(v["virtual_counts"][0].as_object().unwrap().contains_key("poi_category"));
}

#[tokio::test]
async fn repeated_requests_are_byte_identical() {
    let app = app(state());
    let body = json!({"boundaries": [rect_json(sub_rect(0.1, 0.1, 0.4, 0.3)), rect_json(sub_rect(0.5, 0.5, 0.7, 0.8))]});
    let mk = || {
        Request::post("/v1/embed")
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(body.to_string()))
            .unwrap()
    };
    let (_, _, a) = send(&app, mk()).await;
    let (_, _, b) = send(&app, mk()).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn output_order_follows_input_order() {
    let app = app(state());
    let (a, b) = (rect_json(sub_rect(0.1, 0.1, 0.4, 0.3)), rect_json(sub_rect(0.5, 0.5, 0.7, 0.8)));
    let (_, ab) = post(&app, "/v1/embed", &json!({"boundaries": [a, b]})).await;
    let (_, ba) = post(&app, "/v1/embed", &json!({"boundaries": [b, a]})).await;
    let close = |x: &Value, y: &Value| {
        x.as_array().unwrap().iter().zip(y.as_array().unwrap()).all(|(p, q)| {
            let (p, q) = (p.as_f64().unwrap(), q.as_f64().unwrap());
            (p - q).abs() <= 1e-5 * p.abs().max(1.0)
        })
    };
    assert!(close(&ab["embeddings"][0], &ba["embeddings"][1]));
    assert!(close(&ab["embeddings"][1], &ba["embeddings"][0]));
    assert_eq!(ab["token_counts"][0], ba["token_counts"][1]);
}

#[tokio::test]
async fn empty_region_is_flagged_without_failing_the_batch() {
    let body = json!({"boundaries": [rect_json(sub_rect(0.2, 0.2, 0.5, 0.5)), rect_json(outside())]});
    let (s, v) = post(&app(state()), "/v1/embed", &body).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["embeddings"][0].is_array());
    assert!(v["errors"][0].is_null());
    assert!(v["embeddings"][1].is_null());
    assert_eq!(v["errors"][1], "empty_region");
}

#[tokio::test]
async fn malformed_requests_get_400() {
    let app = app(state());
    let req = Request::post("/v1/embed").body(Body::from("{not json")).unwrap();
    let (s, _, b) = send(&app, req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["error"], "invalid_request");

    let (s, v) = post(&app, "/v1/embed", &json!({"boundaries": [[[0.0, 0.0], [1.0, 1.0]]]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_polygon");
    assert!(v["detail"].as_str().unwrap().starts_with("boundary 0"));

    let (s, v) = post(&app, "/v1/similar", &json!({"boundary": {"type": "Point", "coordinates": [1, 2]}})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_polygon");

    let (s, _) = get(&app, "/v1/tokens?bbox=1,2,3").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = get(&app, "/v1/tokens?limit=-4").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn similar_returns_k_sorted_results() {
    let app = app(private_state());
    let q = rect_json(sub_rect(0.3, 0.3, 0.5, 0.5));
    let (s, v) = post(&app, "/v1/similar", &json!({"boundary": q, "k": 0})).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["results"].as_array().unwrap().is_empty());

    let (_, v) = post(&app, "/v1/similar", &json!({"boundary": q, "k": 3})).await;
    let r = v["results"].as_array().unwrap();
    assert_eq!(r.len(), 3);
    let scores: Vec<f64> = r.iter().map(|x| x["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(scores.iter().all(|s| (-1.0 - 1e-9..=1.0 + 1e-9).contains(s)));
    assert!(r.iter().all(|x| x["source"] == "pool"));

    // Embedding the query itself puts it in the session, where it scores 1.
    post(&app, "/v1/embed", &json!({"boundaries": [q]})).await;
    let (_, v) = post(&app, "/v1/similar", &json!({"boundary": q, "k": 1})).await;
    let top = &v["results"][0];
    assert_eq!(top["source"], "session");
    assert!((top["score"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    let (s, v) = post(&app, "/v1/similar", &json!({"boundary": rect_json(outside()), "k": 3})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "empty_region");
}

#[tokio::test]
async fn predict_uses_the_named_head() {
    let st = state();
    let app = app(st.clone());
    let q = rect_json(sub_rect(0.2, 0.2, 0.6, 0.6));
    let (s, v) = post(&app, "/v1/predict", &json!({"boundary": q, "task": "nope"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_task");

    let (s, v) = post(&app, "/v1/predict", &json!({"boundary": q, "task": "intensity"})).await;
    assert_eq!(s, StatusCode::OK);
    let z = v["prediction"].as_f64().unwrap();
    assert!(z.is_finite());
    let head = &st.heads["intensity"];
    let value = v["value"].as_f64().unwrap();
    assert!((value - (head.label_mean + head.label_sd * z)).abs() <= 1e-9 * value.abs().max(1.0));
    assert_eq!(v["batch_stats"]["batch_size"], head.batch_size);

    let emb = st.embed(&[BoundaryPrompt::parse(&q.to_string()).unwrap()]).unwrap().remove(0).unwrap();
    assert_eq!(z, head.predict(&emb.embedding));

    let (s, _) = post(&app, "/v1/predict", &json!({"boundary": rect_json(outside()), "task": "intensity"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn tokens_in_a_quadrant_match_a_scan() {
    let st = state();
    let app = app(st.clone());
    let q = sub_rect(0.0, 0.0, 0.5, 0.5);
    let g = &st.bundle.graph;
    let mut want: Vec<String> = g
        .spatial_tokens()
        .filter(|&t| q.contains(g.coord(t).unwrap()))
        .map(|t| format!("{}:{}", g.types()[t.type_index as usize].name, g.external_id(t)))
        .collect();
    want.sort();
    let uri = format!("/v1/tokens?bbox={},{},{},{}&limit=100000", q.min_x, q.min_y, q.max_x, q.max_y);
    let (s, v) = get(&app, &uri).await;
    assert_eq!(s, StatusCode::OK);
    let toks = v["tokens"].as_array().unwrap();
    let mut got: Vec<String> = toks
        .iter()
        .map(|t| format!("{}:{}", t["type"].as_str().unwrap(), t["id"].as_str().unwrap()))
        .collect();
    got.sort();
    assert_eq!(got, want);
    assert_eq!(v["total"], want.len());
    for t in toks {
        assert!(q.contains(Point::new(t["x"].as_f64().unwrap(), t["y"].as_f64().unwrap())));
    }

    let (_, thin) = get(&app, &format!("{uri}&limit=10").replace("limit=100000&", "")).await;
    assert_eq!(thin["total"], want.len());
    assert_eq!(thin["returned"], 10);
    assert_eq!(thin["tokens"].as_array().unwrap().len(), 10);
    for t in thin["tokens"].as_array().unwrap() {
        let key = format!("{}:{}", t["type"].as_str().unwrap(), t["id"].as_str().unwrap());
        assert!(want.binary_search(&key).is_ok());
    }

    let (_, all) = get(&app, "/v1/tokens?limit=100000").await;
    assert_eq!(all["total"], g.spatial_count());
}

#[tokio::test]
async fn meta_reports_totals_and_counters() {
    let st = private_state();
    let app = app(st.clone());
    post(&app, "/v1/embed", &json!({"boundaries": [rect_json(sub_rect(0.1, 0.1, 0.5, 0.5)), rect_json(outside())]})).await;
    get(&app, "/v1/tokens?limit=1").await;
    let (s, v) = get(&app, "/v1/meta").await;
    assert_eq!(s, StatusCode::OK);
    let g = &st.bundle.graph;
    assert_eq!(v["graph"]["n_spatial"], g.spatial_count());
    assert_eq!(v["graph"]["n_virtual"], g.virtual_count());
    assert_eq!(v["graph"]["n_edges"], g.edge_count());
    let totals: u64 = v["graph"]["spatial_totals"].as_object().unwrap().values().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(totals as usize, g.spatial_count());
    let types = v["graph"]["types"].as_array().unwrap();
    assert_eq!(types.len(), g.types().len());
    let all: u64 = types.iter().map(|t| t["count"].as_u64().unwrap()).sum();
    assert_eq!(all as usize, g.spatial_count() + g.virtual_count());
    assert_eq!(v["tasks"], json!(["intensity"]));
    assert_eq!(v["d_region"], 16);
    assert_eq!(v["pool_size"], st.model.pool.len());
    assert_eq!(v["session_size"], 1);
    assert_eq!(v["requests"]["embed"], 1);
    assert_eq!(v["requests"]["tokens"], 1);
    assert_eq!(v["requests"]["meta"], 1);
    assert_eq!(v["requests"]["similar"], 0);
}

#[tokio::test]
async fn cors_and_fallback() {
    let a = app(state());
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/v1/embed")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let (s, h, _) = send(&a, req).await;
    assert!(s.is_success());
    assert_eq!(h[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
    assert!(h[header::ACCESS_CONTROL_ALLOW_METHODS].to_str().unwrap().contains("POST"));

    let req = Request::get("/v1/meta").header(header::ORIGIN, "http://x.test").body(Body::empty()).unwrap();
    let (_, h, _) = send(&a, req).await;
    assert_eq!(h[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let pinned = router(state(), Some("http://ui.test")).unwrap();
    let req = Request::get("/v1/meta").header(header::ORIGIN, "http://ui.test").body(Body::empty()).unwrap();
    let (_, h, _) = send(&pinned, req).await;
    assert_eq!(h[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://ui.test");
    let req = Request::get("/v1/meta").header(header::ORIGIN, "http://evil.test").body(Body::empty()).unwrap();
    let (_, h, _) = send(&pinned, req).await;
    // The pinned origin is sent regardless; the browser rejects the mismatch.
    assert_eq!(h[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://ui.test");

    let (s, v) = get(&a, "/v2/nothing").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_found");
    let (s, _, _) = send(&a, Request::get("/v1/embed").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
}
