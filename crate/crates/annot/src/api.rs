use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use attnprobe::corpus::{load_corpus, tokenize, BBox, Corpus, Split};
use attnprobe::heatmap::{encode_png, image_png, HeatmapSidecar};
use attnprobe::model::Model;
use attnprobe::saliency::{attention_pixel_scores, PixelPath};

use crate::alias::AliasMap;
use crate::config::ServiceConfig;
use crate::store::{export_csv, Appended, Rating, Store};
use crate::Error;

const DEFAULT_RATER: &str = "rater";

/// Shared state behind the router.
pub struct Service {
    corpus: Corpus,
    /// Instances served, in queue order.
    queue: Vec<usize>,
    models: Vec<(String, Model)>,
    store: RwLock<Store>,
    token: Option<String>,
    seed: u64,
    pixel_path: PixelPath,
}

impl Service {
    pub fn new(
        corpus: Corpus,
        split: Option<Split>,
        models: Vec<(String, Model)>,
        store: Store,
        token: Option<String>,
        seed: u64,
        pixel_path: PixelPath,
    ) -> Result<Self, Error> {
        if models.is_empty() {
            return Err(Error::Config("at least one model must be configured".into()));
        }
        let mut ids: Vec<&str> = models.iter().map(|m| m.0.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("model ids must be distinct".into()));
        }
        let queue = corpus
            .instances
            .iter()
            .enumerate()
            .filter(|(_, i)| split.is_none_or(|s| i.split == s))
            .map(|(k, _)| k)
            .collect();
        Ok(Self {
            corpus,
            queue,
            models,
            store: RwLock::new(store),
            token,
            seed,
            pixel_path,
        })
    }

    pub fn from_config(cfg: &ServiceConfig) -> Result<Self, Error> {
        let corpus = load_corpus(&cfg.corpus)?;
        let models = cfg
            .models
            .iter()
            .map(|m| Ok((m.id.clone(), Model::load(&m.checkpoint)?)))
            .collect::<Result<Vec<_>, Error>>()?;
        let store = Store::open(&cfg.store)?;
        Self::new(corpus, cfg.split, models, store, cfg.token.clone(), cfg.seed, cfg.pixel_path)
    }

    fn aliases(&self, rater_id: &str, instance_id: &str) -> AliasMap {
        AliasMap::new(self.seed, rater_id, instance_id, self.models.len())
    }

    fn instance_index(&self, instance_id: &str) -> Result<usize, ApiError> {
        self.corpus
            .find(instance_id)
            .filter(|k| self.queue.contains(k))
            .ok_or_else(|| ApiError::not_found(format!("unknown instance `{instance_id}`")))
    }

    fn heatmap(&self, model: &Model, instance: usize, tokens: &[String]) -> Result<(HeatmapView, Vec<u8>), ApiError> {
        let image = &self.corpus.instances[instance].image;
        let out = (image.height(), image.width());
        let (v_l, _) = model.encode_image(image)?;
        let (t_l, _) = model.encode_text(tokens)?;
        let att = model.attend(&t_l, &v_l)?;
        let (scores, _) = attention_pixel_scores(&att, out, self.pixel_path)?;
        let png = encode_png(&scores)?;
        let side = HeatmapSidecar::new(&att, out);
        let view = HeatmapView {
            width: side.width,
            height: side.height,
            png_base64: STANDARD.encode(&png),
            grid_rows: side.grid_rows,
            grid_cols: side.grid_cols,
            grid: side.grid,
            no_attn: model.params.has_no_attn().then_some(side.no_attn),
        };
        Ok((view, png))
    }

    fn heatmaps_by_alias(&self, rater_id: &str, instance: usize, tokens: &[String]) -> Result<BTreeMap<String, HeatmapView>, ApiError> {
        let id = &self.corpus.instances[instance].instance_id;
        self.aliases(rater_id, id)
            .iter()
            .map(|(alias, m)| Ok((alias, self.heatmap(&self.models[m].1, instance, tokens)?.0)))
            .collect()
    }

    fn item(&self, rater_id: &str, instance: usize) -> Result<ItemView, ApiError> {
        let inst = &self.corpus.instances[instance];
        let sentences = inst
            .report
            .iter()
            .enumerate()
            .map(|(k, s)| {
                Ok(SentenceView {
                    sentence_index: k,
                    text: s.text.clone(),
                    bboxes: s.bboxes.clone(),
                    heatmaps: self.heatmaps_by_alias(rater_id, instance, &s.tokens)?,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        let position = self.queue.iter().position(|&k| k == instance).unwrap_or(0);
        let png = image_png(&inst.image)?;
        Ok(ItemView {
            rater_id: rater_id.to_string(),
            instance_id: inst.instance_id.clone(),
            position,
            queue_len: self.queue.len(),
            image: ImageView {
                width: inst.image.width(),
                height: inst.image.height(),
                png_base64: STANDARD.encode(png),
            },
            aliases: self.aliases(rater_id, &inst.instance_id).aliases(),
            sentences,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapView {
    pub width: usize,
    pub height: usize,
    pub png_base64: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub grid: Vec<f64>,
    /// Mass on the "No Attn" candidate, shown as a separate badge; absent for
    /// models without the slot.
    pub no_attn: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageView {
    pub width: usize,
    pub height: usize,
    pub png_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceView {
    pub sentence_index: usize,
    pub text: String,
    pub bboxes: Vec<BBox>,
    pub heatmaps: BTreeMap<String, HeatmapView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub rater_id: String,
    pub instance_id: String,
    pub position: usize,
    pub queue_len: usize,
    pub image: ImageView,
    pub aliases: Vec<String>,
    pub sentences: Vec<SentenceView>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<attnprobe::Error> for ApiError {
    fn from(e: attnprobe::Error) -> Self {
        ApiError::bad(e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Conflict(m) => ApiError::new(StatusCode::CONFLICT, m),
            Error::Core(c) => c.into(),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type Shared = Arc<Service>;

fn rater(q: &Option<String>) -> &str {
    q.as_deref().filter(|r| !r.is_empty()).unwrap_or(DEFAULT_RATER)
}

#[derive(Deserialize)]
struct RaterQuery {
    rater_id: Option<String>,
}

async fn session(State(s): State<Shared>, Query(q): Query<RaterQuery>) -> Json<serde_json::Value> {
    let rater_id = rater(&q.rater_id);
    let store = s.store.read().expect("store lock");
    let rated = s
        .queue
        .iter()
        .filter(|&&k| store.rated_instance(rater_id, &s.corpus.instances[k].instance_id))
        .count();
    Json(json!({
        "rater_id": rater_id,
        "queue_len": s.queue.len(),
        "rated": rated,
        "n_aliases": s.models.len(),
    }))
}

#[derive(Deserialize)]
struct NextQuery {
    rater_id: Option<String>,
    instance_id: Option<String>,
}

async fn next_item(State(s): State<Shared>, Query(q): Query<NextQuery>) -> Result<Json<ItemView>, ApiError> {
    let rater_id = rater(&q.rater_id);
    let instance = match &q.instance_id {
        Some(id) => s.instance_index(id)?,
        None => {
            let store = s.store.read().expect("store lock");
            *s.queue
                .iter()
                .find(|&&k| !store.rated_instance(rater_id, &s.corpus.instances[k].instance_id))
                .ok_or_else(|| ApiError::not_found("queue exhausted"))?
        }
    };
    Ok(Json(s.item(rater_id, instance)?))
}

#[derive(Deserialize)]
struct HeatmapQuery {
    rater_id: Option<String>,
    instance_id: String,
    alias: String,
    sentence_index: Option<usize>,
    prompt: Option<String>,
}

async fn heatmap_png(State(s): State<Shared>, Query(q): Query<HeatmapQuery>) -> Result<Response, ApiError> {
    let rater_id = rater(&q.rater_id);
    let instance = s.instance_index(&q.instance_id)?;
    let tokens = match (q.sentence_index, &q.prompt) {
        (Some(k), None) => s.corpus.instances[instance]
            .report
            .get(k)
            .map(|r| r.tokens.clone())
            .ok_or_else(|| ApiError::bad(format!("sentence_index {k} out of range")))?,
        (None, Some(p)) => prompt_tokens(p)?,
        _ => return Err(ApiError::bad("give exactly one of sentence_index and prompt")),
    };
    let m = s
        .aliases(rater_id, &q.instance_id)
        .model_of(&q.alias)
        .ok_or_else(|| ApiError::bad(format!("unknown alias `{}`", q.alias)))?;
    let (_, png) = s.heatmap(&s.models[m].1, instance, &tokens)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

fn prompt_tokens(text: &str) -> Result<Vec<String>, ApiError> {
    let tokens = tokenize(text);
    if text.trim().is_empty() || tokens.is_empty() {
        return Err(ApiError::bad("prompt is empty"));
    }
    Ok(tokens)
}

#[derive(Deserialize)]
struct PromptRequest {
    rater_id: Option<String>,
    instance_id: String,
    text: String,
}

async fn custom_prompt(State(s): State<Shared>, Json(req): Json<PromptRequest>) -> Result<Json<serde_json::Value>, ApiError> {
    let rater_id = rater(&req.rater_id);
    let instance = s.instance_index(&req.instance_id)?;
    let tokens = prompt_tokens(&req.text)?;
    let heatmaps = s.heatmaps_by_alias(rater_id, instance, &tokens)?;
    Ok(Json(json!({
        "instance_id": req.instance_id,
        "text": req.text,
        "heatmaps": heatmaps,
    })))
}

#[derive(Deserialize)]
struct RatingRequest {
    rater_id: Option<String>,
    instance_id: String,
    sentence_index: Option<usize>,
    custom_prompt: Option<String>,
    model_alias: String,
    recall: i64,
    precision: i64,
    intuitiveness: i64,
}

fn likert(name: &str, v: i64) -> Result<u8, ApiError> {
    if (1..=5).contains(&v) {
        Ok(v as u8)
    } else {
        Err(ApiError::bad(format!("{name} must be in 1..=5, got {v}")))
    }
}

async fn submit_rating(State(s): State<Shared>, Json(req): Json<RatingRequest>) -> Result<Response, ApiError> {
    let rater_id = rater(&req.rater_id).to_string();
    let instance = s.instance_index(&req.instance_id)?;
    match (req.sentence_index, &req.custom_prompt) {
        (Some(k), None) if k >= s.corpus.instances[instance].report.len() => {
            return Err(ApiError::bad(format!("sentence_index {k} out of range")))
        }
        (Some(_), None) => {}
        (None, Some(p)) => {
            prompt_tokens(p)?;
        }
        _ => return Err(ApiError::bad("give exactly one of sentence_index and custom_prompt")),
    }
    let (recall, precision, intuitiveness) = (
        likert("recall", req.recall)?,
        likert("precision", req.precision)?,
        likert("intuitiveness", req.intuitiveness)?,
    );
    let m = s
        .aliases(&rater_id, &req.instance_id)
        .model_of(&req.model_alias)
        .ok_or_else(|| ApiError::bad(format!("unknown alias `{}`", req.model_alias)))?;
    let rating = Rating {
        rater_id,
        instance_id: req.instance_id,
        sentence_index: req.sentence_index,
        custom_prompt: req.custom_prompt,
        model_alias: req.model_alias,
        true_model_id: s.models[m].0.clone(),
        recall,
        precision,
        intuitiveness,
        timestamp_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    };
    let appended = s.store.write().expect("store lock").append(rating)?;
    Ok(match appended {
        Appended::New(id) => (StatusCode::CREATED, Json(json!({ "id": id, "duplicate": false }))).into_response(),
        Appended::Duplicate(id) => (StatusCode::OK, Json(json!({ "id": id, "duplicate": true }))).into_response(),
    })
}

async fn export(State(s): State<Shared>) -> Response {
    let records = s.store.read().expect("store lock").records().to_vec();
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], export_csv(&records)).into_response()
}

fn presented_token<'a>(headers: &'a HeaderMap, query: Option<&'a str>) -> Option<&'a str> {
    if let Some(v) = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()) {
        return v.strip_prefix("Bearer ");
    }
    if let Some(v) = headers.get("x-annot-token").and_then(|v| v.to_str().ok()) {
        return Some(v);
    }
    query?
        .split('&')
        .find_map(|kv| kv.strip_prefix("token="))
}

async fn require_token(State(s): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(expected) = &s.token {
        if presented_token(req.headers(), req.uri().query()) != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong token").into_response();
        }
    }
    next.run(req).await
}

/// The service's routes; static UI assets are served from `static_dir` when given.
pub fn router(service: Arc<Service>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/session", get(session))
        .route("/item/next", get(next_item))
        .route("/heatmap.png", get(heatmap_png))
        .route("/rating", post(submit_rating))
        .route("/custom-prompt", post(custom_prompt))
        .route("/export.csv", get(export))
        .route_layer(middleware::from_fn_with_state(service.clone(), require_token))
        .with_state(service);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Loads everything named in `cfg` and serves until the process is stopped.
pub async fn serve(cfg: ServiceConfig) -> Result<(), Error> {
    let service = Arc::new(Service::from_config(&cfg)?);
    let app = router(service, cfg.static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(&cfg.bind).await?;
    eprintln!("annotation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
