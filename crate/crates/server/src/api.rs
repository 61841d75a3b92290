//! HTTP control API.
//!
//! | Method | Path | Who |
//! |---|---|---|
//! | POST | /api/sessions | anyone, within the per-user cap |
//! | GET | /api/sessions | own (student), tenant (instructor), all (admin) |
//! | GET | /api/sessions/:id | as listing |
//! | POST | /api/sessions/:id/{suspend,resume,stop,start} | as listing |
//! | DELETE | /api/sessions/:id | as listing |
//! | GET | /api/hosts | instructor, admin |
//! | POST | /api/plan | instructor, admin |
//! | GET | /api/reports/:run_id | instructor, admin |
//! | POST | /api/tokens | admin |
//! | POST | /api/auth/exchange | unauthenticated; needs an identity hook |
//! | GET | /healthz | unauthenticated |
//!
//! Bodies are JSON. Errors are `{"error": <code>, "message": <text>}` with an
//! optional `violations` list.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{FromRequestParts, Path, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{async_trait, Json, Router};
use serde::{Deserialize, Serialize};
use simdesk_core::lifecycle::Clock;
use simdesk_core::placement::{self, HostDescriptor, PlacementPlan, WorkloadUnit};
use simdesk_core::session::validate_spec;
use simdesk_core::{
    Command, CommandKind, LifecycleError, LifecycleHandle, ResourceLimits, Session, SessionId, SessionSpec,
    SessionState, TenantId, Timestamp,
};

use crate::auth::{bearer, Principal, Role, TokenStore};
use crate::config::TenantConfig;
use crate::identity::{IdentityError, IdentityHook};
use crate::reports::ReportStore;

pub struct ApiState {
    pub lifecycle: LifecycleHandle,
    pub tenants: BTreeMap<TenantId, TenantConfig>,
    pub hosts: Vec<HostDescriptor>,
    pub vehicle_limits: ResourceLimits,
    pub tokens: TokenStore,
    pub reports: ReportStore,
    pub clock: Arc<dyn Clock>,
    pub identity: Option<IdentityHook>,
    /// Serializes creates so the per-user cap check and the create are atomic.
    create_lock: tokio::sync::Mutex<()>,
}

impl ApiState {
    pub fn new(
        lifecycle: LifecycleHandle,
        tenants: Vec<TenantConfig>,
        hosts: Vec<HostDescriptor>,
        vehicle_limits: ResourceLimits,
        clock: Arc<dyn Clock>,
    ) -> ApiState {
        ApiState {
            lifecycle,
            tenants: tenants.into_iter().map(|t| (t.id.clone(), t)).collect(),
            hosts,
            vehicle_limits,
            tokens: TokenStore::default(),
            reports: ReportStore::default(),
            clock,
            identity: None,
            create_lock: tokio::sync::Mutex::new(()),
        }
    }

    pub fn with_reports(mut self, reports: ReportStore) -> Self {
        self.reports = reports;
        self
    }

    pub fn with_identity_hook(mut self, hook: IdentityHook) -> Self {
        self.identity = Some(hook);
        self
    }

    fn now(&self) -> Timestamp {
        self.clock.now()
    }
}

pub fn router(state: Arc<ApiState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/:id", get(get_session).delete(destroy_session))
        .route("/api/sessions/:id/:action", post(session_action))
        .route("/api/hosts", get(list_hosts))
        .route("/api/plan", post(dry_run_plan))
        .route("/api/reports/:run_id", get(get_report))
        .route("/api/tokens", post(issue_token))
        .route("/api/auth/exchange", post(exchange))
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("missing, unknown or expired token")]
    Unauthorized,
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    QuotaExceeded(String),
    #[error("{message}")]
    Unprocessable { message: String, violations: Vec<String> },
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    BadGateway(String),
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::Forbidden(_) => StatusCode::FORBIDDEN,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::QuotaExceeded(_) => StatusCode::TOO_MANY_REQUESTS,
            ApiError::Unprocessable { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::BadGateway(_) => StatusCode::BAD_GATEWAY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthorized => "unauthorized",
            ApiError::Forbidden(_) => "forbidden",
            ApiError::NotFound(_) => "not_found",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Conflict(_) => "conflict",
            ApiError::QuotaExceeded(_) => "quota_exceeded",
            ApiError::Unprocessable { .. } => "invalid",
            ApiError::Unavailable(_) => "unavailable",
            ApiError::BadGateway(_) => "engine_error",
            ApiError::Internal(_) => "internal",
        }
    }

    fn forbidden() -> ApiError {
        ApiError::Forbidden("not permitted for this principal".into())
    }

    fn no_session(id: u32) -> ApiError {
        ApiError::NotFound(format!("no session {id}"))
    }
}

impl From<LifecycleError> for ApiError {
    fn from(e: LifecycleError) -> ApiError {
        let message = e.to_string();
        match e {
            LifecycleError::IllegalTransition(_) => ApiError::Conflict(message),
            LifecycleError::UnknownSession(_) => ApiError::NotFound(message),
            LifecycleError::AllocatorExhausted(_) | LifecycleError::Closed => ApiError::Unavailable(message),
            LifecycleError::InvalidSpec(_) => ApiError::Unprocessable { message, violations: Vec::new() },
            LifecycleError::Engine { .. } => ApiError::BadGateway(message),
            LifecycleError::Journal(_) | LifecycleError::Config(_) => ApiError::Internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        let violations = match &self {
            ApiError::Unprocessable { violations, .. } => violations.clone(),
            _ => Vec::new(),
        };
        let body = ErrorBody { error: self.code().into(), message: self.to_string(), violations };
        let mut resp = (status, Json(body)).into_response();
        if status == StatusCode::UNAUTHORIZED {
            resp.headers_mut().insert(header::WWW_AUTHENTICATE, header::HeaderValue::from_static("Bearer"));
        }
        resp
    }
}

/// The authenticated caller.
pub struct Auth(pub Principal);

#[async_trait]
impl FromRequestParts<Arc<ApiState>> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<ApiState>) -> Result<Self, ApiError> {
        let header = parts.headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).ok_or(ApiError::Unauthorized)?;
        let token = bearer(header).ok_or(ApiError::Unauthorized)?;
        let principal = state.tokens.authenticate(token, state.now()).map_err(|_| ApiError::Unauthorized)?;
        Ok(Auth(principal))
    }
}

/// JSON body whose rejection is reported in the API's error format.
pub struct Body<T>(pub T);

#[async_trait]
impl<T, S> axum::extract::FromRequest<S> for Body<T>
where
    T: serde::de::DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::BadRequest(e.body_text())),
        }
    }
}

/// A session as returned by the API: the stored record plus its public URL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: Session,
    pub url: Option<String>,
}

impl From<Session> for SessionView {
    fn from(session: Session) -> SessionView {
        let url = session.binding.as_ref().map(|b| format!("https://{}/", b.hostname));
        SessionView { session, url }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub image: String,
    /// Defaults to the tenant quota.
    #[serde(default)]
    pub limits: Option<ResourceLimits>,
    #[serde(default)]
    pub stream_ssh: bool,
    #[serde(default)]
    pub aux_bridge: bool,
    #[serde(default)]
    pub vehicles: u32,
}

/// Whether `p` may see and operate session `s`. Sessions of other tenants
/// are reported as absent.
fn authorize(p: &Principal, s: &Session) -> Result<(), ApiError> {
    if p.role == Role::Admin {
        return Ok(());
    }
    if s.spec.tenant != p.tenant {
        return Err(ApiError::no_session(s.id.get()));
    }
    if p.role == Role::Instructor || s.spec.owner == p.subject {
        Ok(())
    } else {
        Err(ApiError::forbidden())
    }
}

pub fn visible(p: &Principal, s: &Session) -> bool {
    s.state != SessionState::Destroyed && authorize(p, s).is_ok()
}

fn require_role(p: &Principal, allowed: &[Role]) -> Result<(), ApiError> {
    if allowed.contains(&p.role) {
        Ok(())
    } else {
        Err(ApiError::forbidden())
    }
}

fn lookup(state: &ApiState, p: &Principal, raw: u32) -> Result<Session, ApiError> {
    let id = SessionId::new(raw).ok_or_else(|| ApiError::no_session(raw))?;
    let session = state.lifecycle.get(id).filter(|s| s.state != SessionState::Destroyed);
    let session = session.ok_or_else(|| ApiError::no_session(raw))?;
    authorize(p, &session)?;
    Ok(session)
}

async fn healthz(State(state): State<Arc<ApiState>>) -> Json<serde_json::Value> {
    let live = state.lifecycle.sessions().values().filter(|s| s.state != SessionState::Destroyed).count();
    Json(serde_json::json!({ "status": "ok", "sessions": live }))
}

async fn create_session(
    State(state): State<Arc<ApiState>>,
    Auth(p): Auth,
    Body(req): Body<CreateSessionRequest>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let tenant = state.tenants.get(&p.tenant).ok_or_else(|| ApiError::Forbidden(format!("tenant {} is not configured", p.tenant.0)))?;
    let spec = SessionSpec {
        owner: p.subject.clone(),
        tenant: p.tenant.clone(),
        image: req.image,
        limits: req.limits.unwrap_or(tenant.quota),
        stream_ssh: req.stream_ssh,
        aux_bridge: req.aux_bridge,
        vehicles: req.vehicles,
    };
    if let Err(v) = validate_spec(&spec, &tenant.quota) {
        return Err(ApiError::Unprocessable {
            message: "session spec exceeds the tenant quota or is malformed".into(),
            violations: v.iter().map(ToString::to_string).collect(),
        });
    }

    let _serial = state.create_lock.lock().await;
    let owned = state
        .lifecycle
        .sessions()
        .values()
        .filter(|s| s.state != SessionState::Destroyed && s.spec.owner == p.subject && s.spec.tenant == p.tenant)
        .count();
    if owned >= tenant.max_sessions_per_user as usize {
        return Err(ApiError::QuotaExceeded(format!(
            "{} already has {owned} session(s); the limit is {}",
            p.subject.0, tenant.max_sessions_per_user
        )));
    }
    let session = state.lifecycle.apply(Command::new(CommandKind::Create(spec), p.subject.clone(), state.now())).await?;
    tracing::info!(id = %session.id, owner = %p.subject.0, state = ?session.state, "session created");
    Ok((StatusCode::CREATED, Json(session.into())))
}

async fn list_sessions(State(state): State<Arc<ApiState>>, Auth(p): Auth) -> Json<Vec<SessionView>> {
    let table = state.lifecycle.sessions();
    Json(table.values().filter(|s| visible(&p, s)).cloned().map(SessionView::from).collect())
}

async fn get_session(State(state): State<Arc<ApiState>>, Auth(p): Auth, Path(id): Path<u32>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(lookup(&state, &p, id)?.into()))
}

async fn session_action(
    State(state): State<Arc<ApiState>>,
    Auth(p): Auth,
    Path((id, action)): Path<(u32, String)>,
) -> Result<Json<SessionView>, ApiError> {
    let make: fn(SessionId) -> CommandKind = match action.as_str() {
        "suspend" => CommandKind::Suspend,
        "resume" => CommandKind::Resume,
        "stop" => CommandKind::Stop,
        "start" => CommandKind::Start,
        other => return Err(ApiError::NotFound(format!("no action {other:?}"))),
    };
    let session = lookup(&state, &p, id)?;
    let updated = state.lifecycle.apply(Command::new(make(session.id), p.subject.clone(), state.now())).await?;
    Ok(Json(updated.into()))
}

async fn destroy_session(State(state): State<Arc<ApiState>>, Auth(p): Auth, Path(id): Path<u32>) -> Result<Json<SessionView>, ApiError> {
    let session = lookup(&state, &p, id)?;
    let gone = state.lifecycle.apply(Command::new(CommandKind::Destroy(session.id), p.subject.clone(), state.now())).await?;
    Ok(Json(gone.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostView {
    #[serde(flatten)]
    pub host: HostDescriptor,
    /// Containers of live sessions on this host.
    pub containers: usize,
    pub cpu_committed: f64,
    pub mem_committed: u64,
}

async fn list_hosts(State(state): State<Arc<ApiState>>, Auth(p): Auth) -> Result<Json<Vec<HostView>>, ApiError> {
    require_role(&p, &[Role::Instructor, Role::Admin])?;
    let table = state.lifecycle.sessions();
    let views = state
        .hosts
        .iter()
        .map(|h| {
            let mut v = HostView { host: h.clone(), containers: 0, cpu_committed: 0.0, mem_committed: 0 };
            for s in table.values().filter(|s| s.state.has_container()) {
                let mut add = |limits: &ResourceLimits| {
                    v.containers += 1;
                    v.cpu_committed += limits.cpu_cores;
                    v.mem_committed += limits.memory_bytes;
                };
                if s.container.as_ref().is_some_and(|c| c.host == h.id) {
                    add(&s.spec.limits);
                }
                for _ in s.workers.iter().filter(|w| w.host == h.id) {
                    add(&state.vehicle_limits);
                }
            }
            v
        })
        .collect();
    Ok(Json(views))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRequest {
    pub vehicles: u32,
    /// Renderer demand; defaults to the caller's tenant quota.
    #[serde(default)]
    pub renderer: Option<ResourceLimits>,
    /// Per-vehicle demand; defaults to the server's vehicle limits.
    #[serde(default)]
    pub vehicle: Option<ResourceLimits>,
}

async fn dry_run_plan(
    State(state): State<Arc<ApiState>>,
    Auth(p): Auth,
    Body(req): Body<PlanRequest>,
) -> Result<Json<PlacementPlan>, ApiError> {
    require_role(&p, &[Role::Instructor, Role::Admin])?;
    let renderer = match req.renderer {
        Some(r) => r,
        None => state.tenants.get(&p.tenant).map(|t| t.quota).ok_or_else(|| ApiError::BadRequest("renderer demand is required".into()))?,
    };
    let vehicle = req.vehicle.unwrap_or(state.vehicle_limits);
    let units = workload(req.vehicles, &renderer, &vehicle);
    placement::plan(&state.hosts, &units)
        .map(Json)
        .map_err(|e| ApiError::Unprocessable { message: e.to_string(), violations: Vec::new() })
}

/// The renderer followed by `vehicles` SITL units.
pub fn workload(vehicles: u32, renderer: &ResourceLimits, vehicle: &ResourceLimits) -> Vec<WorkloadUnit> {
    std::iter::once(WorkloadUnit::renderer(renderer.cpu_cores, renderer.memory_bytes))
        .chain((0..vehicles).map(|i| WorkloadUnit::vehicle(i, vehicle.cpu_cores, vehicle.memory_bytes)))
        .collect()
}

async fn get_report(
    State(state): State<Arc<ApiState>>,
    Auth(p): Auth,
    Path(run_id): Path<String>,
) -> Result<Json<simdesk_bench::LatencyReport>, ApiError> {
    require_role(&p, &[Role::Instructor, Role::Admin])?;
    state.reports.get(&run_id).map(Json).ok_or_else(|| ApiError::NotFound(format!("no report {run_id:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRequest {
    pub subject: String,
    pub tenant: TenantId,
    pub role: Role,
    /// Lifetime in seconds; omitted means no expiry.
    #[serde(default)]
    pub ttl_secs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
    pub principal: Principal,
    /// Milliseconds since the epoch.
    pub expires_at: Option<Timestamp>,
}

async fn issue_token(
    State(state): State<Arc<ApiState>>,
    Auth(p): Auth,
    Body(req): Body<TokenRequest>,
) -> Result<(StatusCode, Json<TokenResponse>), ApiError> {
    require_role(&p, &[Role::Admin])?;
    if !state.tenants.contains_key(&req.tenant) {
        return Err(ApiError::Unprocessable { message: format!("unknown tenant {}", req.tenant.0), violations: vec!["tenant".into()] });
    }
    if req.subject.trim().is_empty() {
        return Err(ApiError::Unprocessable { message: "empty subject".into(), violations: vec!["subject".into()] });
    }
    let principal = Principal { subject: req.subject.into(), tenant: req.tenant, role: req.role };
    let now = state.now();
    let expires_at = req.ttl_secs.map(|s| Timestamp(now.0.saturating_add(s.saturating_mul(1000))));
    let token = state.tokens.issue(principal.clone(), expires_at, now);
    Ok((StatusCode::CREATED, Json(TokenResponse { token, principal, expires_at })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeRequest {
    /// Session cookie from the upstream portal, passed to the identity hook.
    pub cookie: String,
}

async fn exchange(
    State(state): State<Arc<ApiState>>,
    Body(req): Body<ExchangeRequest>,
) -> Result<(StatusCode, Json<TokenResponse>), ApiError> {
    let hook = state.identity.as_ref().ok_or_else(|| ApiError::NotFound("no identity hook configured".into()))?;
    let principal = hook.verify(&req.cookie).await.map_err(|e| match e {
        IdentityError::Rejected => ApiError::Unauthorized,
        IdentityError::Unreachable(m) | IdentityError::Malformed(m) => ApiError::BadGateway(m),
    })?;
    if principal.role == Role::Admin {
        return Err(ApiError::Forbidden("the identity hook cannot grant admin".into()));
    }
    if !state.tenants.contains_key(&principal.tenant) {
        return Err(ApiError::Forbidden(format!("tenant {} is not configured", principal.tenant.0)));
    }
    let now = state.now();
    let expires_at = Some(Timestamp(now.0.saturating_add(hook.ttl().as_millis() as u64)));
    let token = state.tokens.issue(principal.clone(), expires_at, now);
    Ok((StatusCode::CREATED, Json(TokenResponse { token, principal, expires_at })))
}
