//! The index service HTTP API.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query as UrlQuery, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{stream, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::aggregator::Aggregator;
use crate::index::{ClusterSummary, Index};
use crate::model::{Epoch, HostRecord, MetricKind, ValueType};
use crate::query::{Query, SyntaxError};
use crate::render::{RenderEngine, TemplateError};
use crate::sources::{SourceError, SourceSpec};
use crate::subscription::{Subscription, SubscriptionStore, UnknownSubscription};
use crate::trigger::{RuleSpec, TriggerError, TriggerService};
use crate::Clock;

pub const DEFAULT_MAX_RESULTS: usize = 1000;

const UI_PLACEHOLDER: &str = "<!DOCTYPE html>\n<html><head><title>Campus Grid Portal</title></head>\n<body><p>No portal bundle is installed. Set <code>ui_dir</code> in the aggregator config.</p></body></html>\n";

#[derive(Debug)]
pub enum ApiError {
    Syntax(SyntaxError),
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Gone(String),
    ResultTooLarge { count: usize, max: usize },
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Syntax(e) => (
                StatusCode::BAD_REQUEST,
                json!({"error": "SyntaxError", "offset": e.offset, "message": e.message}),
            ),
            ApiError::BadRequest(m) => (
                StatusCode::BAD_REQUEST,
                json!({"error": "BadRequest", "message": m}),
            ),
            ApiError::NotFound(m) => (
                StatusCode::NOT_FOUND,
                json!({"error": "NotFound", "message": m}),
            ),
            ApiError::Conflict(m) => (
                StatusCode::CONFLICT,
                json!({"error": "Conflict", "message": m}),
            ),
            ApiError::Gone(m) => (
                StatusCode::GONE,
                json!({"error": "LeaseExpired", "message": m}),
            ),
            ApiError::ResultTooLarge { count, max } => (
                StatusCode::BAD_REQUEST,
                json!({"error": "ResultTooLarge", "message": format!("{count} hosts match; the limit is {max}")}),
            ),
            ApiError::Internal(m) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({"error": "Internal", "message": m}),
            ),
        };
        (status, Json(body)).into_response()
    }
}

impl From<SyntaxError> for ApiError {
    fn from(e: SyntaxError) -> Self {
        ApiError::Syntax(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::BadRequest(e.body_text())
    }
}

impl From<SourceError> for ApiError {
    fn from(e: SourceError) -> Self {
        let m = e.to_string();
        match e {
            SourceError::DuplicateSource(_) => ApiError::Conflict(m),
            SourceError::UnknownSource(_) => ApiError::NotFound(m),
            SourceError::LeaseExpired(_) => ApiError::Gone(m),
            SourceError::Invalid { .. } => ApiError::BadRequest(m),
        }
    }
}

impl From<TriggerError> for ApiError {
    fn from(e: TriggerError) -> Self {
        let m = e.to_string();
        match e {
            TriggerError::ValidationError { .. } => ApiError::BadRequest(m),
            TriggerError::DuplicateRule(_) => ApiError::Conflict(m),
            TriggerError::UnknownRule(_) => ApiError::NotFound(m),
        }
    }
}

impl From<UnknownSubscription> for ApiError {
    fn from(e: UnknownSubscription) -> Self {
        ApiError::NotFound(e.to_string())
    }
}

impl From<TemplateError> for ApiError {
    fn from(e: TemplateError) -> Self {
        match e {
            TemplateError::UnknownTemplate(_) => ApiError::NotFound(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Wire form of one metric sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricJson {
    pub value: serde_json::Value,
    #[serde(rename = "type")]
    pub value_type: ValueType,
    pub units: String,
    pub kind: MetricKind,
    pub collected_at: Epoch,
    pub ttl_seconds: u64,
}

/// Wire form of a host record; `version` is the index version the record
/// was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostJson {
    pub host_id: String,
    pub cluster: String,
    pub agent_version: String,
    pub heartbeat_at: Epoch,
    pub version: u64,
    pub metrics: BTreeMap<String, MetricJson>,
}

impl HostJson {
    pub fn new(host: &HostRecord, version: u64) -> Self {
        HostJson {
            host_id: host.host_id.clone(),
            cluster: host.cluster.clone(),
            agent_version: host.agent_version.clone(),
            heartbeat_at: host.heartbeat_at,
            version,
            metrics: host
                .samples
                .values()
                .map(|s| {
                    (
                        s.name.clone(),
                        MetricJson {
                            value: s.value.to_json(),
                            value_type: s.value.value_type(),
                            units: s.units.clone(),
                            kind: s.kind,
                            collected_at: s.collected_at,
                            ttl_seconds: s.ttl_seconds,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClustersResponse {
    pub version: u64,
    pub clusters: Vec<ClusterSummary>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QueryRequest {
    #[serde(default)]
    pub q: String,
    #[serde(default)]
    pub project: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
struct QueryParams {
    #[serde(default)]
    q: String,
    /// Comma-separated projection.
    #[serde(default)]
    project: String,
}

impl QueryParams {
    fn parse(&self) -> ApiResult<Query> {
        let project = self
            .project
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty());
        Ok(Query::parse(&self.q)?.with_projection(project)?)
    }
}

#[derive(Debug, Deserialize)]
struct EnabledBody {
    enabled: bool,
}

/// Everything the handlers share.
#[derive(Clone)]
pub struct ApiState {
    pub aggregator: Arc<Aggregator>,
    pub subscriptions: Arc<SubscriptionStore>,
    pub triggers: Arc<TriggerService>,
    pub render: Arc<RenderEngine>,
    pub clock: Arc<dyn Clock>,
    pub max_results: usize,
    pub ui_dir: Option<PathBuf>,
}

impl ApiState {
    fn index(&self) -> &Arc<Index> {
        self.aggregator.index()
    }

    fn run_query(&self, query: &Query) -> ApiResult<Json<Vec<HostJson>>> {
        let snapshot = self.index().snapshot();
        let hosts = snapshot.evaluate(query, self.clock.now());
        if hosts.len() > self.max_results {
            return Err(ApiError::ResultTooLarge {
                count: hosts.len(),
                max: self.max_results,
            });
        }
        Ok(Json(
            hosts
                .iter()
                .map(|h| HostJson::new(h, snapshot.version))
                .collect(),
        ))
    }
}

pub fn router(state: ApiState) -> Router {
    let ui = match &state.ui_dir {
        Some(dir) => Router::new().fallback_service(ServeDir::new(dir)),
        None => Router::new().fallback(|| async { Html(UI_PLACEHOLDER) }),
    };
    Router::new()
        .route("/v1/clusters", get(clusters))
        .route("/v1/hosts", get(hosts))
        .route("/v1/hosts/{host_id}", get(host))
        .route("/v1/query", post(query))
        .route("/v1/index.xml", get(index_xml))
        .route("/v1/subscriptions", post(subscribe))
        .route("/v1/subscriptions/{id}/events", get(events))
        .route("/v1/stream", get(event_stream))
        .route("/v1/sources", get(list_sources).post(register_source))
        .route(
            "/v1/sources/{id}",
            get(get_source).delete(deregister_source),
        )
        .route("/v1/sources/{id}/renew", post(renew_source))
        .route("/v1/view/{template}", get(view))
        .route("/v1/triggers", get(list_triggers).post(add_trigger))
        .route("/v1/triggers/fired", get(fired_triggers))
        .route(
            "/v1/triggers/{id}",
            get(get_trigger).post(update_trigger).delete(delete_trigger),
        )
        .nest_service("/ui", ui)
        .with_state(state)
}

async fn clusters(State(s): State<ApiState>) -> Json<ClustersResponse> {
    let snapshot = s.index().snapshot();
    Json(ClustersResponse {
        version: snapshot.version,
        clusters: snapshot.clusters(),
    })
}

async fn hosts(
    State(s): State<ApiState>,
    UrlQuery(params): UrlQuery<QueryParams>,
) -> ApiResult<Json<Vec<HostJson>>> {
    s.run_query(&params.parse()?)
}

async fn query(
    State(s): State<ApiState>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<Json<Vec<HostJson>>> {
    let Json(req) = body?;
    s.run_query(&Query::parse(&req.q)?.with_projection(req.project)?)
}

async fn host(State(s): State<ApiState>, Path(host_id): Path<String>) -> ApiResult<Json<HostJson>> {
    let snapshot = s.index().snapshot();
    snapshot
        .host(&host_id)
        .map(|h| Json(HostJson::new(h, snapshot.version)))
        .ok_or_else(|| ApiError::NotFound(format!("unknown host {host_id}")))
}

async fn index_xml(State(s): State<ApiState>) -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "application/xml")],
        s.index().snapshot().to_xml(),
    )
}

async fn subscribe(
    State(s): State<ApiState>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let Json(req) = body?;
    let q = Query::parse(&req.q)?.with_projection(req.project)?;
    let id = s
        .subscriptions
        .subscribe(q, &s.index().snapshot(), s.clock.now());
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn events(
    State(s): State<ApiState>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<crate::subscription::ChangeEvent>>> {
    Ok(Json(s.subscriptions.poll(
        &id,
        &s.index().snapshot(),
        s.clock.now(),
    )?))
}

async fn event_stream(
    State(s): State<ApiState>,
    UrlQuery(params): UrlQuery<QueryParams>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let q = params.parse()?;
    let rx = s.index().watch_versions();
    let sub = Subscription::new(String::new(), q, &s.index().snapshot(), s.clock.now());
    let events = stream::unfold((rx, sub, s), |(mut rx, mut sub, s)| async move {
        rx.changed().await.ok()?;
        let evs = sub.poll(&s.index().snapshot(), s.clock.now());
        let batch: Vec<Result<Event, Infallible>> = evs
            .iter()
            .map(|e| {
                Ok(Event::default()
                    .id(e.version.to_string())
                    .json_data(e)
                    .unwrap_or_default())
            })
            .collect();
        Some((stream::iter(batch), (rx, sub, s)))
    })
    .flatten();
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn list_sources(State(s): State<ApiState>) -> impl IntoResponse {
    Json(s.aggregator.sources())
}

async fn get_source(
    State(s): State<ApiState>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    s.aggregator
        .source(&id)
        .map(Json)
        .ok_or_else(|| SourceError::UnknownSource(id).into())
}

async fn register_source(
    State(s): State<ApiState>,
    body: Result<Json<SourceSpec>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(spec) = body?;
    let reg = s.aggregator.register_source(spec, s.clock.now())?;
    Ok((StatusCode::CREATED, Json(reg)))
}

async fn renew_source(
    State(s): State<ApiState>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.aggregator.renew_lease(&id, s.clock.now())?))
}

async fn deregister_source(
    State(s): State<ApiState>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.aggregator.deregister(&id)?))
}

async fn view(
    State(s): State<ApiState>,
    Path(template): Path<String>,
    UrlQuery(params): UrlQuery<QueryParams>,
) -> ApiResult<Response> {
    let q = params.parse()?;
    if s.render.get(&template).is_none() {
        return Err(TemplateError::UnknownTemplate(template).into());
    }
    let now = s.clock.now();
    let hosts = s.index().snapshot().evaluate(&q, now);
    let body = s.render.render(&template, &hosts, now)?;
    Ok(([(header::CONTENT_TYPE, "text/html; charset=utf-8")], body).into_response())
}

async fn list_triggers(State(s): State<ApiState>) -> impl IntoResponse {
    Json(s.triggers.store().list())
}

async fn fired_triggers(State(s): State<ApiState>) -> impl IntoResponse {
    Json(s.triggers.recent())
}

async fn get_trigger(
    State(s): State<ApiState>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    s.triggers
        .store()
        .get(&id)
        .map(Json)
        .ok_or_else(|| TriggerError::UnknownRule(id).into())
}

async fn add_trigger(
    State(s): State<ApiState>,
    body: Result<Json<RuleSpec>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(spec) = body?;
    Ok((StatusCode::CREATED, Json(s.triggers.store().add(spec)?)))
}

async fn update_trigger(
    State(s): State<ApiState>,
    Path(id): Path<String>,
    body: Result<Json<EnabledBody>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(b) = body?;
    Ok(Json(s.triggers.store().set_enabled(&id, b.enabled)?))
}

async fn delete_trigger(
    State(s): State<ApiState>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.triggers.store().delete(&id)?))
}
