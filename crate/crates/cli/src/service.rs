//! HTTP service over a loaded model and graph. Requests never change the
//! model; the only shared mutable state is the session ring, the bitmap
//! pool and request counters.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bpurf_core::downstream::TaskHead;
use bpurf_core::extraction::{RegionSubgraph, VirtualBitmap};
use bpurf_core::geometry::Rect;
use bpurf_core::graph::GraphBundle;
use bpurf_core::prompt::BoundaryPrompt;
use bpurf_core::region::{EmbeddedRegion, RegionModel};
use bpurf_core::Error;
use serde::Deserialize;
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::output::{count_maps, EmbedResponse};

pub const SESSION_CAPACITY: usize = 1024;
pub const DEFAULT_TOKEN_LIMIT: usize = 5000;

struct SessionRegion {
    boundary: BoundaryPrompt,
    embedding: Vec<f64>,
}

#[derive(Default)]
struct Counters {
    embed: AtomicU64,
    similar: AtomicU64,
    predict: AtomicU64,
    tokens: AtomicU64,
    meta: AtomicU64,
}

pub struct ServiceState {
    pub model: RegionModel,
    pub bundle: GraphBundle,
    pub heads: BTreeMap<String, TaskHead>,
    pool_embeddings: Vec<Vec<f64>>,
    session: Mutex<VecDeque<SessionRegion>>,
    bitmaps: Mutex<Vec<VirtualBitmap>>,
    counters: Counters,
}

impl ServiceState {
    pub fn new(model: RegionModel, bundle: GraphBundle, heads: BTreeMap<String, TaskHead>) -> bpurf_core::Result<Self> {
        let pool = model.pool_embeddings()?;
        let pool_embeddings = (0..pool.rows()).map(|i| pool.row(i).to_vec()).collect();
        Ok(Self {
            model,
            bundle,
            heads,
            pool_embeddings,
            session: Mutex::new(VecDeque::new()),
            bitmaps: Mutex::new(Vec::new()),
            counters: Counters::default(),
        })
    }

    /// Embed boundaries as one batch, extracting with a pooled bitmap.
    pub fn embed(&self, prompts: &[BoundaryPrompt]) -> bpurf_core::Result<Vec<bpurf_core::Result<EmbeddedRegion>>> {
        let mut bitmap = self
            .bitmaps
            .lock()
            .expect("bitmap pool")
            .pop()
            .unwrap_or_else(|| VirtualBitmap::for_graph(&self.bundle.graph));
        let prepared: Vec<bpurf_core::Result<RegionSubgraph>> =
            prompts.iter().map(|p| self.model.prepare(p, &self.bundle, &mut bitmap)).collect();
        self.bitmaps.lock().expect("bitmap pool").push(bitmap);
        self.model.embed_prepared(prepared)
    }

    fn embed_one(&self, prompt: &BoundaryPrompt) -> Result<EmbeddedRegion, ApiError> {
        let mut out = self.embed(std::slice::from_ref(prompt))?;
        Ok(out.pop().expect("one result")?)
    }

    fn remember(&self, boundary: &BoundaryPrompt, embedding: &[f64]) {
        let mut s = self.session.lock().expect("session");
        if s.len() == SESSION_CAPACITY {
            s.pop_front();
        }
        s.push_back(SessionRegion {
            boundary: boundary.clone(),
            embedding: embedding.to_vec(),
        });
    }

    pub fn session_len(&self) -> usize {
        self.session.lock().expect("session").len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: String,
    pub detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            error: error.into(),
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", detail)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = e.to_string();
        match e {
            Error::EmptyRegion => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "empty_region", detail),
            Error::InvalidPolygon(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_polygon", detail),
            e if e.is_numeric() => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "numeric_failure", detail),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.error, "detail": self.detail}))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;
type Shared = Arc<ServiceState>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("body: {e}")))
}

fn parse_boundary(v: &Value) -> Result<BoundaryPrompt, ApiError> {
    BoundaryPrompt::from_json(v).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_polygon", e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Deserialize)]
struct EmbedRequest {
    boundaries: Vec<Value>,
}

async fn embed_handler(State(st): State<Shared>, body: Bytes) -> ApiResult {
    st.counters.embed.fetch_add(1, Ordering::Relaxed);
    let req: EmbedRequest = parse_body(&body)?;
    let prompts = req
        .boundaries
        .iter()
        .enumerate()
        .map(|(i, b)| {
            parse_boundary(b).map_err(|mut e| {
                e.detail = format!("boundary {i}: {}", e.detail);
                e
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let resp = blocking(move || {
        let results = st.embed(&prompts)?;
        for (p, r) in prompts.iter().zip(&results) {
            if let Ok(e) = r {
                st.remember(p, &e.embedding);
            }
        }
        Ok(EmbedResponse::new(st.model.d_region(), &st.bundle.graph, &results))
    })
    .await?;
    Ok(Json(resp).into_response())
}

#[derive(Deserialize)]
struct SimilarRequest {
    boundary: Value,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    5
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

async fn similar_handler(State(st): State<Shared>, body: Bytes) -> ApiResult {
    st.counters.similar.fetch_add(1, Ordering::Relaxed);
    let req: SimilarRequest = parse_body(&body)?;
    let prompt = parse_boundary(&req.boundary)?;
    let k = req.k;
    let results = blocking(move || {
        let q = st.embed_one(&prompt)?;
        let mut scored: Vec<(f64, &'static str, usize, Value)> = st
            .pool_embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (cosine(&q.embedding, e), "pool", i, st.model.pool.entries[i].boundary.to_geojson()))
            .collect();
        let session = st.session.lock().expect("session");
        scored.extend(
            session
                .iter()
                .enumerate()
                .map(|(i, s)| (cosine(&q.embedding, &s.embedding), "session", i, s.boundary.to_geojson())),
        );
        drop(session);
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(score, source, index, boundary)| json!({"score": score, "source": source, "index": index, "boundary": boundary}))
            .collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(json!({"k": k, "results": results})).into_response())
}

#[derive(Deserialize)]
struct PredictRequest {
    boundary: Value,
    task: String,
}

async fn predict_handler(State(st): State<Shared>, body: Bytes) -> ApiResult {
    st.counters.predict.fetch_add(1, Ordering::Relaxed);
    let req: PredictRequest = parse_body(&body)?;
    if !st.heads.contains_key(&req.task) {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_task",
            format!("no task head named `{}`", req.task),
        ));
    }
    let prompt = parse_boundary(&req.boundary)?;
    let out = blocking(move || {
        let e = st.embed_one(&prompt)?;
        let head = &st.heads[&req.task];
        let z = head.predict(&e.embedding);
        let (spatial, _) = count_maps(&st.bundle.graph, &e.token_counts);
        Ok(json!({
            "task": req.task,
            "prediction": z,
            "value": head.label_mean + head.label_sd * z,
            "batch_stats": {"mean": head.label_mean, "sd": head.label_sd, "batch_size": head.batch_size},
            "token_counts": spatial,
        }))
    })
    .await?;
    Ok(Json(out).into_response())
}

fn parse_bbox(s: &str) -> Result<Rect, ApiError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| ApiError::bad_request(format!("bbox: {e}")))?;
    match v[..] {
        [x0, y0, x1, y1] if v.iter().all(|x| x.is_finite()) && x0 <= x1 && y0 <= y1 => Ok(Rect::new(x0, y0, x1, y1)),
        _ => Err(ApiError::bad_request("bbox must be x0,y0,x1,y1 with x0 <= x1 and y0 <= y1")),
    }
}

/// Evenly spaced picks of `limit` out of `n` indices.
pub fn thin(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    (0..limit).map(|i| i * n / limit).collect()
}

async fn tokens_handler(State(st): State<Shared>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    st.counters.tokens.fetch_add(1, Ordering::Relaxed);
    let graph = &st.bundle.graph;
    let rect = match q.get("bbox") {
        Some(s) => parse_bbox(s)?,
        None => graph.bbox().ok_or_else(|| ApiError::from(Error::EmptyGraph))?,
    };
    let limit = match q.get("limit") {
        Some(s) => s.parse::<usize>().map_err(|e| ApiError::bad_request(format!("limit: {e}")))?,
        None => DEFAULT_TOKEN_LIMIT,
    };
    let hits = st.bundle.gir.query_rect(&rect);
    let tokens: Vec<Value> = thin(hits.len(), limit)
        .into_iter()
        .map(|i| {
            let t = hits[i];
            let p = graph.coord(t).expect("spatial token");
            json!({
                "id": graph.external_id(t),
                "type": graph.types()[t.type_index as usize].name,
                "x": p.x,
                "y": p.y,
            })
        })
        .collect();
    Ok(Json(json!({"total": hits.len(), "returned": tokens.len(), "tokens": tokens})).into_response())
}

async fn meta_handler(State(st): State<Shared>) -> ApiResult {
    st.counters.meta.fetch_add(1, Ordering::Relaxed);
    let g = &st.bundle.graph;
    let types: Vec<Value> = g
        .types()
        .iter()
        .enumerate()
        .map(|(i, t)| json!({"name": t.name, "spatial": t.spatial, "count": g.type_count(i as u16)}))
        .collect();
    let spatial_totals: BTreeMap<&str, usize> = g
        .types()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.spatial)
        .map(|(i, t)| (t.name.as_str(), g.type_count(i as u16)))
        .collect();
    let bbox = g.bbox().map(|r| vec![r.min_x, r.min_y, r.max_x, r.max_y]);
    let c = &st.counters;
    Ok(Json(json!({
        "graph": {
            "n_spatial": g.spatial_count(),
            "n_virtual": g.virtual_count(),
            "n_edges": g.edge_count(),
            "bbox": bbox,
            "types": types,
            "spatial_totals": spatial_totals,
        },
        "model": st.model.manifest,
        "channels": st.model.manifest.channels.enabled(),
        "d_region": st.model.d_region(),
        "pool_size": st.model.pool.len(),
        "session_size": st.session_len(),
        "tasks": st.heads.keys().collect::<Vec<_>>(),
        "requests": {
            "embed": c.embed.load(Ordering::Relaxed),
            "similar": c.similar.load(Ordering::Relaxed),
            "predict": c.predict.load(Ordering::Relaxed),
            "tokens": c.tokens.load(Ordering::Relaxed),
            "meta": c.meta.load(Ordering::Relaxed),
        },
    }))
    .into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

/// Routes with CORS for `cors_origin`, or for any origin when not given.
pub fn router(state: Shared, cors_origin: Option<&str>) -> anyhow::Result<Router> {
    let origin = match cors_origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o)?),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE]);
    Ok(Router::new()
        .route("/v1/embed", post(embed_handler))
        .route("/v1/similar", post(similar_handler))
        .route("/v1/predict", post(predict_handler))
        .route("/v1/tokens", get(tokens_handler))
        .route("/v1/meta", get(meta_handler))
        .fallback(not_found)
        .layer(cors)
        .with_state(state))
}

pub async fn serve(state: Shared, addr: SocketAddr, cors_origin: Option<&str>) -> anyhow::Result<()> {
    let app = router(state, cors_origin)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thinning_keeps_limit() {
        assert_eq!(thin(3, 10), vec![0, 1, 2]);
        assert_eq!(thin(10, 4), vec![0, 2, 5, 7]);
        assert!(thin(10, 0).is_empty());
    }

    #[test]
    fn bbox_parsing() {
        assert_eq!(parse_bbox("0,1,2,3").unwrap(), Rect::new(0.0, 1.0, 2.0, 3.0));
        assert!(parse_bbox("0,1,2").is_err());
        assert!(parse_bbox("2,0,1,3").is_err());
        assert!(parse_bbox("a,b,c,d").is_err());
    }

    #[test]
    fn cosine_of_parallel_vectors() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
