//! HTTP routes. Handlers parse and validate input, then call [`Engine`].

use std::collections::HashMap;
use std::sync::Arc;

use alarm_core::rules::{MiningConfig, Rule};
use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Path, Query, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, GroupSpec, RunRequest};
use crate::error::{ApiError, FieldError};

type Shared = State<Arc<Engine>>;
type ApiResult<T> = Result<T, ApiError>;

/// JSON body whose decoding errors become 422 responses naming the field.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::field("body", e.body_text()))?;
        let de = &mut serde_json::Deserializer::from_slice(&bytes);
        serde_path_to_error::deserialize(de).map(Body).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "body".to_owned() } else { path };
            ApiError::Invalid(vec![FieldError {
                field,
                message: e.into_inner().to_string(),
            }])
        })
    }
}

type Params = Query<HashMap<String, String>>;

fn opt_usize(q: &HashMap<String, String>, key: &str) -> ApiResult<Option<usize>> {
    q.get(key)
        .map(|v| {
            v.parse().map_err(|_| {
                ApiError::field(key, format!("expected a non-negative integer, got {v:?}"))
            })
        })
        .transpose()
}

fn required<'a>(q: &'a HashMap<String, String>, key: &str) -> ApiResult<&'a str> {
    q.get(key)
        .map(String::as_str)
        .ok_or_else(|| ApiError::field(key, "missing query parameter"))
}

/// Run CPU-bound engine work off the async executor.
async fn blocking<T: Send + 'static>(
    engine: Arc<Engine>,
    f: impl FnOnce(&Engine) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::Internal(format!("worker panicked: {e}")))?
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/datasets", post(upload_dataset).get(list_datasets))
        .route("/runs", post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/anomalies", get(anomalies))
        .route("/runs/{id}/labels", post(labels))
        .route("/runs/{id}/summary", get(summary))
        .route("/runs/{id}/explore/histogram", get(histogram))
        .route("/runs/{id}/explore/density", get(density))
        .route("/runs/{id}/explore/parallel", get(parallel))
        .route("/runs/{id}/explore/lookout", get(lookout))
        .route("/runs/{id}/rules/candidates", post(candidates))
        .route("/runs/{id}/rules/score", post(score))
        .route("/rules", post(save_rule).get(list_rules))
        .with_state(engine)
}

async fn upload_dataset(State(engine): Shared, mut form: Multipart) -> ApiResult<Response> {
    let mut csv = None;
    let mut schema = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::field("body", e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_owned();
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::field(&name, e.body_text()))?;
        match name.as_str() {
            "csv" => csv = Some(data),
            "schema" => schema = Some(data),
            other => return Err(ApiError::field(other, "unexpected form field")),
        }
    }
    let mut missing = Vec::new();
    for (name, v) in [("csv", &csv), ("schema", &schema)] {
        if v.is_none() {
            missing.push(FieldError {
                field: name.into(),
                message: "missing form field".into(),
            });
        }
    }
    if !missing.is_empty() {
        return Err(ApiError::Invalid(missing));
    }
    let schema = String::from_utf8(schema.unwrap().to_vec())
        .map_err(|_| ApiError::field("schema", "not UTF-8"))?;
    let csv = csv.unwrap();
    let info = blocking(engine, move |e| e.add_dataset(&csv, &schema)).await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn list_datasets(State(engine): Shared) -> impl IntoResponse {
    Json(engine.datasets())
}

async fn create_run(State(engine): Shared, Body(req): Body<RunRequest>) -> ApiResult<Response> {
    let (run, fresh) = engine.create_run(&req)?;
    if fresh {
        let (engine, run) = (engine.clone(), run.clone());
        tokio::task::spawn_blocking(move || engine.fit_run(&run));
    }
    Ok((StatusCode::ACCEPTED, Json(run.info())).into_response())
}

async fn get_run(State(engine): Shared, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(engine.run(&id)?.info()))
}

async fn anomalies(
    State(engine): Shared,
    Path(id): Path<String>,
    Query(q): Params,
) -> ApiResult<Response> {
    let run = engine.run(&id)?;
    let top = opt_usize(&q, "top")?;
    let out = blocking(engine, move |e| e.anomalies(&run, top)).await?;
    Ok(Json(out).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsRequest {
    rows: Vec<usize>,
}

async fn labels(
    State(engine): Shared,
    Path(id): Path<String>,
    Body(req): Body<LabelsRequest>,
) -> ApiResult<Response> {
    let run = engine.run(&id)?;
    Ok(Json(engine.import_labels(&run, req.rows)?).into_response())
}

async fn summary(
    State(engine): Shared,
    Path(id): Path<String>,
    Query(q): Params,
) -> ApiResult<Response> {
    let run = engine.run(&id)?;
    let clusters = opt_usize(&q, "clusters")?
        .ok_or_else(|| ApiError::field("clusters", "missing query parameter"))?;
    let top = opt_usize(&q, "top")?;
    let out = blocking(engine, move |e| e.summary(&run, clusters, top)).await?;
    Ok(Json(&*out).into_response())
}

async fn explore(
    engine: Arc<Engine>,
    id: String,
    features: Vec<String>,
    top: Option<usize>,
) -> ApiResult<Response> {
    let run = engine.run(&id)?;
    let out = blocking(engine, move |e| e.explore(&run, &features, top)).await?;
    Ok(Json(out).into_response())
}

async fn histogram(
    State(engine): Shared,
    Path(id): Path<String>,
    Query(q): Params,
) -> ApiResult<Response> {
    let f = required(&q, "feature")?.to_owned();
    explore(engine, id, vec![f], opt_usize(&q, "top")?).await
}

async fn density(
    State(engine): Shared,
    Path(id): Path<String>,
    Query(q): Params,
) -> ApiResult<Response> {
    let fx = required(&q, "fx")?.to_owned();
    let fy = required(&q, "fy")?.to_owned();
    explore(engine, id, vec![fx, fy], opt_usize(&q, "top")?).await
}

async fn parallel(
    State(engine): Shared,
    Path(id): Path<String>,
    Query(q): Params,
) -> ApiResult<Response> {
    let features = required(&q, "features")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect();
    explore(engine, id, features, opt_usize(&q, "top")?).await
}

async fn lookout(
    State(engine): Shared,
    Path(id): Path<String>,
    Query(q): Params,
) -> ApiResult<Response> {
    let run = engine.run(&id)?;
    let budget = opt_usize(&q, "budget")?
        .ok_or_else(|| ApiError::field("budget", "missing query parameter"))?;
    let top = opt_usize(&q, "top")?;
    let out = blocking(engine, move |e| e.lookout(&run, budget, top)).await?;
    Ok(Json(out).into_response())
}

#[derive(Deserialize)]
struct CandidatesRequest {
    #[serde(flatten)]
    group: GroupSpec,
    coverage_min: f64,
    purity_min: f64,
}

async fn candidates(
    State(engine): Shared,
    Path(id): Path<String>,
    Body(req): Body<CandidatesRequest>,
) -> ApiResult<Response> {
    let run = engine.run(&id)?;
    let config = MiningConfig::with_thresholds(req.coverage_min, req.purity_min);
    let out = blocking(engine, move |e| e.rule_candidates(&run, req.group, &config)).await?;
    Ok(Json(out).into_response())
}

#[derive(Deserialize)]
struct ScoreRequest {
    rule: Rule,
    #[serde(flatten)]
    group: GroupSpec,
}

async fn score(
    State(engine): Shared,
    Path(id): Path<String>,
    Body(req): Body<ScoreRequest>,
) -> ApiResult<Response> {
    let run = engine.run(&id)?;
    let out = blocking(engine, move |e| e.rule_score(&run, &req.rule, req.group)).await?;
    Ok(Json(out).into_response())
}

#[derive(Serialize, Deserialize)]
pub struct SaveRuleRequest {
    pub rule: Rule,
    pub run_id: String,
    #[serde(flatten)]
    pub group: GroupSpec,
}

async fn save_rule(State(engine): Shared, Body(req): Body<SaveRuleRequest>) -> ApiResult<Response> {
    let run = engine.run(&req.run_id)?;
    let out = blocking(engine, move |e| e.save_rule(&run, req.rule, req.group)).await?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn list_rules(State(engine): Shared) -> ApiResult<Response> {
    Ok(Json(engine.list_rules()?).into_response())
}
