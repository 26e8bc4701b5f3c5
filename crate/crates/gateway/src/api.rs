//! The `/v1` HTTP/JSON surface and the internal replication endpoints.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use mlcluster_core::audit::AuditReport;
use mlcluster_core::clock::Millis;
use mlcluster_core::control::ControlPlane;
use mlcluster_core::domain::{
    Checkpoint, Dataset, LogLine, Memo, MetricEvent, Role, Session, SessionState, Submission,
    TelemetrySample, UserAccount,
};
use mlcluster_core::ids::{CheckpointId, DatasetId, NodeId, SessionId, SweepId, TeamId, UserId};
use mlcluster_core::registry::{DatasetPush, UserAction};
use mlcluster_core::scheduler::failover::{HeartbeatMessage, Role as ReplicaRole};
use mlcluster_core::session::automl::{SweepLaunch, SweepStatus};
use mlcluster_core::session::export::{CheckpointManifest, SessionBundle};
use mlcluster_core::session::sweep::{SweepSpec, SweepTemplate};
use mlcluster_core::session::{
    Comparison, EventFilter, ForkRequest, InferenceOutput, Leaderboard, RunRequest, SessionFilter,
};
use mlcluster_core::sim::scenario::FaultSpec;
use mlcluster_core::sim::UtilizationSummary;
use mlcluster_core::{Error, RejectReason};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;

type Shared = Arc<Cluster>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn unauthorized(message: &str) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::NotFound { .. } => (StatusCode::NOT_FOUND, "not_found"),
            Error::Duplicate { .. } => (StatusCode::CONFLICT, "duplicate"),
            Error::PermissionDenied(_) => (StatusCode::FORBIDDEN, "permission_denied"),
            Error::InvalidState { .. } => (StatusCode::CONFLICT, "invalid_state"),
            Error::Rejected(RejectReason::CreditExhausted) => {
                (StatusCode::PAYMENT_REQUIRED, "credit_exhausted")
            }
            Error::Rejected(RejectReason::PermissionDenied) => {
                (StatusCode::FORBIDDEN, "permission_denied")
            }
            Error::Rejected(RejectReason::Infeasible) => {
                (StatusCode::UNPROCESSABLE_ENTITY, "infeasible")
            }
            Error::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid"),
            Error::NotPrimary { .. } => (StatusCode::SERVICE_UNAVAILABLE, "not_primary"),
            Error::Invariant(_) | Error::Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.kind.into(),
            message: self.message,
        };
        (self.status, ApiJson(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON response body terminated by a newline.
pub struct ApiJson<T>(pub T);

impl<T: Serialize> IntoResponse for ApiJson<T> {
    fn into_response(self) -> Response {
        match serde_json::to_vec(&self.0) {
            Ok(mut body) => {
                body.push(b'\n');
                ([(CONTENT_TYPE, "application/json")], body).into_response()
            }
            Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        }
    }
}

/// JSON request body whose rejections are reported as JSON errors.
pub struct JsonBody<T>(pub T);

impl<S, T> FromRequest<S> for JsonBody<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match axum::Json::<T>::from_request(req, state).await {
            Ok(axum::Json(v)) => Ok(Self(v)),
            Err(e @ JsonRejection::MissingJsonContentType(_)) => Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "bad_request",
                e.body_text(),
            )),
            Err(e) => Err(ApiError::bad_request(e.body_text())),
        }
    }
}

/// Query string whose rejections are reported as JSON errors.
pub struct Params<T>(pub T);

impl<S, T> FromRequestParts<S> for Params<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(v)| Self(v))
            .map_err(|e: QueryRejection| ApiError::bad_request(e.body_text()))
    }
}

/// The authenticated user behind a bearer token.
pub struct Caller(pub UserId);

impl FromRequestParts<Shared> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(
        parts: &mut Parts,
        state: &Shared,
    ) -> Result<Self, Self::Rejection> {
        let header = parts
            .headers
            .get(AUTHORIZATION)
            .ok_or_else(|| ApiError::unauthorized("missing bearer token"))?;
        let token = header
            .to_str()
            .ok()
            .and_then(|h| h.strip_prefix("Bearer "))
            .map(str::trim)
            .ok_or_else(|| ApiError::unauthorized("malformed authorization header"))?;
        state
            .user_for_token(token)
            .map(Caller)
            .ok_or_else(|| ApiError::unauthorized("unknown token"))
    }
}

fn require_admin(c: &Cluster, user: &UserId) -> ApiResult<()> {
    let admin = c.query(|p| Ok(p.state().user(user)?.is_admin()))?;
    if admin {
        Ok(())
    } else {
        Err(Error::PermissionDenied(format!("{user} is not an admin")).into())
    }
}

fn page<T>(items: Vec<T>, offset: Option<usize>, limit: Option<usize>) -> Vec<T> {
    items
        .into_iter()
        .skip(offset.unwrap_or(0))
        .take(limit.unwrap_or(usize::MAX))
        .collect()
}

pub fn router(cluster: Shared) -> Router {
    let sessions = Router::new()
        .route("/", post(run).get(list_sessions))
        .route("/{id}", get(get_session))
        .route("/{id}/stop", post(stop))
        .route("/{id}/rm", post(rm))
        .route("/{id}/resume", post(resume))
        .route("/{id}/fork", post(fork))
        .route("/{id}/serve", post(serve))
        .route("/{id}/submit", post(submit))
        .route("/{id}/infer", post(infer))
        .route("/{id}/memo", post(add_memo))
        .route("/{id}/memos", get(memos))
        .route("/{id}/logs", get(logs))
        .route("/{id}/events", get(events))
        .route("/{id}/eventlen", get(eventlen))
        .route("/{id}/checkpoints", get(checkpoints))
        .route("/{id}/checkpoints/{ckpt}", get(checkpoint))
        .route("/{id}/diff", get(diff))
        .route("/{id}/bundle", get(bundle));
    let v1 = Router::new()
        .route("/login", post(login))
        .route("/logout", post(logout))
        .route("/status", get(status))
        .nest("/sessions", sessions)
        .route("/datasets", post(push_dataset).get(list_datasets))
        .route("/leaderboard/{dataset}", get(leaderboard))
        .route("/telemetry/nodes", get(telemetry_nodes))
        .route("/telemetry/sessions/{id}", get(telemetry_session))
        .route("/telemetry/aggregate", get(telemetry_aggregate))
        .route("/sweeps", post(create_sweep))
        .route("/sweeps/{id}", get(sweep_status))
        .route("/users", post(create_user))
        .route("/users/me", get(me))
        .route("/users/{id}/credit", post(set_credit))
        .route("/admin/advance", post(advance))
        .route("/admin/faults", post(fault))
        .route("/admin/audit", get(audit));
    let internal = Router::new()
        .route("/log", get(internal_log))
        .route("/heartbeat", get(internal_heartbeat));
    Router::new()
        .nest("/v1", v1)
        .nest("/internal", internal)
        .fallback(|| async {
            ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
        })
        .with_state(cluster)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginRequest {
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoginResponse {
    pub user_id: UserId,
    pub role: Role,
}

async fn login(
    State(c): State<Shared>,
    JsonBody(req): JsonBody<LoginRequest>,
) -> ApiResult<ApiJson<LoginResponse>> {
    let user_id = c
        .user_for_token(&req.token)
        .ok_or_else(|| ApiError::unauthorized("unknown token"))?;
    let role = c.query(|p| Ok(p.state().user(&user_id)?.role))?;
    Ok(ApiJson(LoginResponse { user_id, role }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}

async fn logout(Caller(_): Caller) -> ApiJson<Ack> {
    ApiJson(Ack { ok: true })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub node_id: NodeId,
    pub alive: bool,
    pub total_gpus: u32,
    pub available_gpus: u32,
    pub total_memory: u64,
    pub available_memory: u64,
    pub cached_datasets: Vec<DatasetId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRow {
    pub index: usize,
    pub alive: bool,
    pub role: ReplicaRole,
    pub epoch: u64,
    pub max_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusBody {
    pub scheduler_epoch: u64,
    pub nodes: Vec<NodeRow>,
    pub queue_depth: usize,
    pub now: Millis,
    pub primary: Option<usize>,
    pub replicas: Vec<ReplicaRow>,
}

async fn status(State(c): State<Shared>) -> ApiJson<StatusBody> {
    ApiJson(c.read(|sim| {
        let replicas = (0..sim.replicas())
            .map(|i| {
                let r = sim.replica(i);
                ReplicaRow {
                    index: i,
                    alive: sim.replica_alive(i),
                    role: r.role(),
                    epoch: r.epoch(),
                    max_seq: r.plane.log().max_seq(),
                }
            })
            .collect();
        let (scheduler_epoch, nodes, queue_depth) = match sim.primary() {
            Ok(p) => {
                let s = p.state();
                let nodes = s
                    .nodes
                    .values()
                    .map(|n| NodeRow {
                        node_id: n.node_id.clone(),
                        alive: n.is_alive(),
                        total_gpus: n.total_gpus,
                        available_gpus: n.available_gpus,
                        total_memory: n.total_memory,
                        available_memory: n.available_memory,
                        cached_datasets: n.cached_datasets.iter().cloned().collect(),
                    })
                    .collect();
                (p.epoch(), nodes, s.queue.len())
            }
            Err(_) => (0, Vec::new(), 0),
        };
        StatusBody {
            scheduler_epoch,
            nodes,
            queue_depth,
            now: sim.now(),
            primary: sim.primary_index(),
            replicas,
        }
    }))
}

async fn run(
    State(c): State<Shared>,
    Caller(user): Caller,
    JsonBody(req): JsonBody<RunRequest>,
) -> ApiResult<Response> {
    let session = c.command(|p| {
        let sid = p.run(&user, req)?;
        p.get_session(&user, &sid)
    })?;
    Ok((StatusCode::CREATED, ApiJson(session)).into_response())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SessionQuery {
    pub owner: Option<UserId>,
    pub state: Option<String>,
    pub dataset: Option<DatasetId>,
    pub limit: Option<usize>,
    pub offset: Option<usize>,
}

async fn list_sessions(
    State(c): State<Shared>,
    Caller(user): Caller,
    Params(q): Params<SessionQuery>,
) -> ApiResult<ApiJson<Vec<Session>>> {
    let state = match q.state.as_deref() {
        None | Some("") => None,
        Some(raw) => Some(
            SessionState::parse(raw)
                .ok_or_else(|| ApiError::bad_request(format!("unknown state `{raw}`")))?,
        ),
    };
    let filter = SessionFilter {
        owner: q.owner,
        state,
        dataset: q.dataset,
    };
    let all = c.query(|p| p.list_sessions(&user, &filter))?;
    Ok(ApiJson(page(all, q.offset, q.limit)))
}

async fn get_session(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
) -> ApiResult<ApiJson<Session>> {
    let sid = SessionId::new(id);
    Ok(ApiJson(c.query(|p| p.get_session(&user, &sid))?))
}

async fn stop(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
) -> ApiResult<ApiJson<Session>> {
    let sid = SessionId::new(id);
    Ok(ApiJson(c.command(|p| {
        p.stop(&user, &sid)?;
        p.get_session(&user, &sid)
    })?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removed {
    pub removed: SessionId,
}

async fn rm(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
) -> ApiResult<ApiJson<Removed>> {
    let sid = SessionId::new(id);
    c.command(|p| p.rm(&user, &sid))?;
    Ok(ApiJson(Removed { removed: sid }))
}

async fn resume(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
) -> ApiResult<ApiJson<Session>> {
    let sid = SessionId::new(id);
    Ok(ApiJson(c.command(|p| {
        p.resume(&user, &sid)?;
        p.get_session(&user, &sid)
    })?))
}

async fn fork(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    JsonBody(req): JsonBody<ForkRequest>,
) -> ApiResult<Response> {
    let sid = SessionId::new(id);
    let child = c.command(|p| {
        let child = p.fork(&user, &sid, req)?;
        p.get_session(&user, &child)
    })?;
    Ok((StatusCode::CREATED, ApiJson(child)).into_response())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointChoice {
    #[serde(default)]
    pub checkpoint_id: Option<CheckpointId>,
}

async fn serve(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    JsonBody(req): JsonBody<CheckpointChoice>,
) -> ApiResult<ApiJson<Session>> {
    let sid = SessionId::new(id);
    Ok(ApiJson(
        c.command(|p| p.serve(&user, &sid, req.checkpoint_id))?,
    ))
}

async fn submit(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    JsonBody(req): JsonBody<CheckpointChoice>,
) -> ApiResult<ApiJson<Submission>> {
    let sid = SessionId::new(id);
    Ok(ApiJson(
        c.command(|p| p.submit(&user, &sid, req.checkpoint_id))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub session_id: SessionId,
    pub output: InferenceOutput,
    /// Modeled round trip to the serving node, in virtual milliseconds.
    pub latency_ms: Millis,
}

async fn infer(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    JsonBody(payload): JsonBody<serde_json::Value>,
) -> ApiResult<ApiJson<InferResponse>> {
    let sid = SessionId::new(id);
    let output = c.query(|p| p.infer(&user, &sid, &payload))?;
    Ok(ApiJson(InferResponse {
        session_id: sid,
        output,
        latency_ms: 2 * c.config().sim.latency,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoRequest {
    pub text: String,
}

async fn add_memo(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    JsonBody(req): JsonBody<MemoRequest>,
) -> ApiResult<ApiJson<Memo>> {
    let sid = SessionId::new(id);
    Ok(ApiJson(c.command(|p| p.memo(&user, &sid, req.text))?))
}

async fn memos(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
) -> ApiResult<ApiJson<Vec<Memo>>> {
    let sid = SessionId::new(id);
    Ok(ApiJson(c.query(|p| p.memos(&user, &sid))?))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StreamQuery {
    #[serde(default)]
    pub follow: bool,
    pub name: Option<String>,
    pub from_step: Option<u64>,
    pub to_step: Option<u64>,
    pub limit: Option<usize>,
    pub offset: Option<usize>,
}

impl StreamQuery {
    fn filter(&self) -> EventFilter {
        EventFilter {
            name: self.name.clone(),
            from_step: self.from_step,
            to_step: self.to_step,
        }
    }
}

fn ndjson<T: Serialize>(items: &[T]) -> Bytes {
    let mut out = Vec::new();
    for item in items {
        if serde_json::to_writer(&mut out, item).is_ok() {
            out.push(b'\n');
        }
    }
    Bytes::from(out)
}

/// Streams `read` as line-delimited JSON until the session is terminal or gone.
fn follow<T, F>(c: Shared, sid: SessionId, read: F) -> Response
where
    T: Serialize + Send + 'static,
    F: Fn(&ControlPlane) -> mlcluster_core::Result<Vec<T>> + Send + Sync + 'static,
{
    let read = Arc::new(read);
    let stream = futures::stream::unfold(Some(0usize), move |sent| {
        let c = c.clone();
        let sid = sid.clone();
        let read = read.clone();
        async move {
            let mut sent = sent?;
            loop {
                let polled = c.query(|p| {
                    let items = read(p)?;
                    let done = p
                        .state()
                        .session(&sid)
                        .map_or(true, |s| s.state.is_terminal());
                    Ok((items, done))
                });
                match polled {
                    Ok((items, done)) if items.len() > sent => {
                        let chunk = ndjson(&items[sent..]);
                        sent = items.len();
                        return Some((Ok::<_, Infallible>(chunk), (!done).then_some(sent)));
                    }
                    Ok((_, true)) | Err(Error::NotFound { .. }) => return None,
                    Ok(_) | Err(Error::NotPrimary { .. }) => {
                        tokio::time::sleep(Duration::from_millis(50)).await;
                    }
                    Err(e) => {
                        let body = ErrorBody {
                            error: "internal".into(),
                            message: e.to_string(),
                        };
                        return Some((Ok(ndjson(&[body])), None));
                    }
                }
            }
        }
    });
    (
        [(CONTENT_TYPE, "application/x-ndjson")],
        Body::from_stream(stream),
    )
        .into_response()
}

async fn logs(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    Params(q): Params<StreamQuery>,
) -> ApiResult<Response> {
    let sid = SessionId::new(id);
    let lines: Vec<LogLine> = c.query(|p| p.logs(&user, &sid))?;
    if q.follow {
        let s = sid.clone();
        return Ok(follow(c, sid, move |p| p.logs(&user, &s)));
    }
    Ok(ApiJson(page(lines, q.offset, q.limit)).into_response())
}

async fn events(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    Params(q): Params<StreamQuery>,
) -> ApiResult<Response> {
    let sid = SessionId::new(id);
    let filter = q.filter();
    let all: Vec<MetricEvent> = c.query(|p| p.events(&user, &sid, &filter))?;
    if q.follow {
        let s = sid.clone();
        return Ok(follow(c, sid, move |p| p.events(&user, &s, &filter)));
    }
    Ok(ApiJson(page(all, q.offset, q.limit)).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Count {
    pub session_id: SessionId,
    pub count: usize,
}

async fn eventlen(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    Params(q): Params<StreamQuery>,
) -> ApiResult<ApiJson<Count>> {
    let sid = SessionId::new(id);
    let count = c.query(|p| p.eventlen(&user, &sid, &q.filter()))?;
    Ok(ApiJson(Count {
        session_id: sid,
        count,
    }))
}

async fn checkpoints(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
) -> ApiResult<ApiJson<CheckpointManifest>> {
    let sid = SessionId::new(id);
    let checkpoints = c.query(|p| p.checkpoints(&user, &sid))?;
    Ok(ApiJson(CheckpointManifest {
        session_id: sid,
        checkpoints,
    }))
}

async fn checkpoint(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path((id, ckpt)): Path<(String, String)>,
) -> ApiResult<ApiJson<Checkpoint>> {
    let sid = SessionId::new(id);
    let found = c
        .query(|p| p.checkpoints(&user, &sid))?
        .into_iter()
        .find(|k| k.checkpoint_id.as_str() == ckpt)
        .ok_or_else(|| Error::not_found("checkpoint", &ckpt))?;
    Ok(ApiJson(found))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiffQuery {
    /// Comma-separated session ids to compare against.
    pub other: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffBody {
    #[serde(flatten)]
    pub comparison: Comparison,
    pub lines: Vec<String>,
}

async fn diff(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    Params(q): Params<DiffQuery>,
) -> ApiResult<ApiJson<DiffBody>> {
    let mut sids = vec![SessionId::new(id)];
    sids.extend(
        q.other
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(SessionId::new),
    );
    let comparison = c.query(|p| p.compare(&user, &sids))?;
    let lines = comparison.diff_lines();
    Ok(ApiJson(DiffBody { comparison, lines }))
}

async fn bundle(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
) -> ApiResult<ApiJson<SessionBundle>> {
    let sid = SessionId::new(id);
    Ok(ApiJson(c.query(|p| {
        Ok(SessionBundle {
            session: p.get_session(&user, &sid)?,
            events: p.events(&user, &sid, &EventFilter::default())?,
            checkpoints: CheckpointManifest {
                session_id: sid.clone(),
                checkpoints: p.checkpoints(&user, &sid)?,
            },
            memos: p.memos(&user, &sid)?,
        })
    })?))
}

async fn push_dataset(
    State(c): State<Shared>,
    Caller(user): Caller,
    JsonBody(push): JsonBody<DatasetPush>,
) -> ApiResult<Response> {
    let ds = c.command(|p| p.push_dataset(&user, push))?;
    Ok((StatusCode::CREATED, ApiJson(ds)).into_response())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PageQuery {
    pub limit: Option<usize>,
    pub offset: Option<usize>,
}

async fn list_datasets(
    State(c): State<Shared>,
    Caller(user): Caller,
    Params(q): Params<PageQuery>,
) -> ApiResult<ApiJson<Vec<Dataset>>> {
    let all = c.query(|p| p.list_datasets(&user))?;
    Ok(ApiJson(page(all, q.offset, q.limit)))
}

async fn leaderboard(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(dataset): Path<String>,
) -> ApiResult<ApiJson<Leaderboard>> {
    let ds = DatasetId::new(dataset);
    Ok(ApiJson(c.query(|p| p.leaderboard(&user, &ds))?))
}

async fn telemetry_nodes(
    State(c): State<Shared>,
    Caller(_): Caller,
) -> ApiJson<Vec<TelemetrySample>> {
    ApiJson(c.read(|sim| sim.telemetry().latest()))
}

async fn telemetry_session(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
    Params(q): Params<PageQuery>,
) -> ApiResult<ApiJson<Vec<TelemetrySample>>> {
    let sid = SessionId::new(id);
    c.query(|p| p.viewable(&user, &sid).map(|_| ()))?;
    let samples = c.read(|sim| sim.telemetry().for_session(&sid));
    Ok(ApiJson(page(samples, q.offset, q.limit)))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WindowQuery {
    /// Trailing window length in virtual milliseconds.
    pub window: Option<Millis>,
    pub from: Option<Millis>,
    pub to: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateBody {
    pub from: Millis,
    pub to: Millis,
    #[serde(flatten)]
    pub summary: UtilizationSummary,
}

/// `[from, to)` for a window query at virtual time `now`.
pub fn window_bounds(q: &WindowQuery, now: Millis) -> (Millis, Millis) {
    let to = q.to.unwrap_or(now);
    let from = q
        .from
        .or(q.window.map(|w| to.saturating_sub(w)))
        .unwrap_or(0);
    (from, to)
}

async fn telemetry_aggregate(
    State(c): State<Shared>,
    Caller(_): Caller,
    Params(q): Params<WindowQuery>,
) -> ApiJson<AggregateBody> {
    ApiJson(c.read(|sim| {
        let (from, to) = window_bounds(&q, sim.now());
        AggregateBody {
            from,
            to,
            summary: sim.telemetry().aggregate(from, to),
        }
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRequest {
    pub spec: SweepSpec,
    pub template: SweepTemplate,
}

async fn create_sweep(
    State(c): State<Shared>,
    Caller(user): Caller,
    JsonBody(req): JsonBody<SweepRequest>,
) -> ApiResult<Response> {
    let launch: SweepLaunch = c.command(|p| p.sweep(&user, req.spec, req.template))?;
    Ok((StatusCode::CREATED, ApiJson(launch)).into_response())
}

async fn sweep_status(
    State(c): State<Shared>,
    Caller(user): Caller,
    Path(id): Path<String>,
) -> ApiResult<ApiJson<SweepStatus>> {
    let id = SweepId::new(id);
    Ok(ApiJson(c.query(|p| p.sweep_status(&user, &id))?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateUser {
    pub user_id: UserId,
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default)]
    pub credit: u64,
    #[serde(default)]
    pub teams: Vec<TeamId>,
}

fn default_role() -> Role {
    Role::User
}

async fn create_user(
    State(c): State<Shared>,
    Caller(admin): Caller,
    JsonBody(req): JsonBody<CreateUser>,
) -> ApiResult<Response> {
    let account = c.command(|p| {
        p.manage_user(
            &admin,
            UserAction::Create {
                user_id: req.user_id,
                role: req.role,
                credit: req.credit,
                teams: req.teams.into_iter().collect(),
            },
        )
    })?;
    Ok((StatusCode::CREATED, ApiJson(account)).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreditRequest {
    pub credit: u64,
}

async fn set_credit(
    State(c): State<Shared>,
    Caller(admin): Caller,
    Path(id): Path<String>,
    JsonBody(req): JsonBody<CreditRequest>,
) -> ApiResult<ApiJson<UserAccount>> {
    let user_id = UserId::new(id);
    Ok(ApiJson(c.command(|p| {
        p.manage_user(
            &admin,
            UserAction::SetCredit {
                user_id,
                credit: req.credit,
            },
        )
    })?))
}

async fn me(State(c): State<Shared>, Caller(user): Caller) -> ApiResult<ApiJson<UserAccount>> {
    Ok(ApiJson(c.query(|p| Ok(p.state().user(&user)?.clone()))?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvanceRequest {
    pub ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clock {
    pub now: Millis,
}

async fn advance(
    State(c): State<Shared>,
    Caller(user): Caller,
    JsonBody(req): JsonBody<AdvanceRequest>,
) -> ApiResult<ApiJson<Clock>> {
    require_admin(&c, &user)?;
    Ok(ApiJson(Clock {
        now: c.advance(req.ms)?,
    }))
}

async fn fault(
    State(c): State<Shared>,
    Caller(user): Caller,
    JsonBody(spec): JsonBody<FaultSpec>,
) -> ApiResult<ApiJson<FaultSpec>> {
    require_admin(&c, &user)?;
    let now = c.now();
    let spec = FaultSpec {
        at: spec.at.max(now),
        ..spec
    };
    c.inject_fault(spec.at, spec.target.clone(), spec.kind.clone());
    Ok(ApiJson(spec))
}

async fn audit(State(c): State<Shared>, Caller(user): Caller) -> ApiResult<ApiJson<AuditReport>> {
    require_admin(&c, &user)?;
    Ok(ApiJson(c.read(|sim| sim.audit())?))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RangeQuery {
    pub from: Option<u64>,
    pub to: Option<u64>,
}

async fn internal_log(
    State(c): State<Shared>,
    Caller(user): Caller,
    Params(q): Params<RangeQuery>,
) -> ApiResult<Response> {
    require_admin(&c, &user)?;
    let records = c.query(|p| {
        let max = p.log().max_seq();
        Ok(p.log()
            .range(q.from.unwrap_or(1).max(1), q.to.unwrap_or(max).min(max)))
    })?;
    Ok(([(CONTENT_TYPE, "application/x-ndjson")], ndjson(&records)).into_response())
}

async fn internal_heartbeat(
    State(c): State<Shared>,
    Caller(user): Caller,
) -> ApiResult<ApiJson<HeartbeatMessage>> {
    require_admin(&c, &user)?;
    let msg = c.read(|sim| {
        sim.primary_index()
            .map(|i| sim.replica(i).heartbeat(sim.now()))
            .ok_or(Error::NotPrimary { epoch: 0 })
    })?;
    Ok(ApiJson(msg))
}
