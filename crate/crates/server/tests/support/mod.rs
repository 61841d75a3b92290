//! An API server on an ephemeral port over the in-memory engine.

#![allow(dead_code)]

use std::sync::Arc;

use chrono::NaiveDate;
use reqwest::{Method, StatusCode};
use serde_json::Value;
use simdesk::auth::{Principal, Role};
use simdesk::{router, ApiState, TenantConfig};
use simdesk_core::lifecycle::{Clock, ManualClock, MemoryJournal};
use simdesk_core::routes::RecordingPublisher;
use simdesk_core::{FakeEngine, Lifecycle, LifecycleConfig, LifecycleHandle, ResourceLimits, Timestamp};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub const DESKTOP: &str = "simdesk/stub-desktop:latest";

pub fn tenant(id: &str, domain: &str, cap: u32) -> TenantConfig {
    TenantConfig {
        id: id.into(),
        domain: domain.into(),
        quota: ResourceLimits::new(4.0, 8 * ResourceLimits::GIB, false),
        max_sessions_per_user: cap,
    }
}

pub struct TestApi {
    pub base: String,
    pub state: Arc<ApiState>,
    pub engine: Arc<FakeEngine>,
    pub publisher: Arc<RecordingPublisher>,
    pub clock: Arc<ManualClock>,
    client: reqwest::Client,
    task: JoinHandle<()>,
}

impl Drop for TestApi {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub async fn start(tenants: Vec<TenantConfig>, max_sessions: u32) -> TestApi {
    start_with(tenants, max_sessions, |s| s).await
}

pub async fn start_with(tenants: Vec<TenantConfig>, max_sessions: u32, customize: impl FnOnce(ApiState) -> ApiState) -> TestApi {
    let engine = Arc::new(FakeEngine::single_host(&[DESKTOP, "simdesk/stub-sitl:latest"]));
    let publisher = Arc::new(RecordingPublisher::default());
    let mut cfg = LifecycleConfig::default();
    cfg.allocator.max_sessions = max_sessions;
    cfg.tenant_domains = tenants.iter().map(|t| (t.id.clone(), t.domain.clone())).collect();
    let hosts = cfg.hosts.clone();
    let vehicle_limits = cfg.vehicle_limits;
    let lc = Lifecycle::open(cfg, engine.clone(), publisher.clone(), Box::new(MemoryJournal::default()), Vec::new())
        .await
        .unwrap();
    let (handle, _) = LifecycleHandle::spawn(lc);
    let start = NaiveDate::from_ymd_opt(2026, 10, 16).unwrap().and_hms_opt(9, 0, 0).unwrap();
    let clock = Arc::new(ManualClock::new(start));
    let state = Arc::new(customize(ApiState::new(handle, tenants, hosts, vehicle_limits, clock.clone() as Arc<dyn Clock>)));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = router(state.clone());
    let task = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    TestApi { base, state, engine, publisher, clock, client: reqwest::Client::new(), task }
}

impl TestApi {
    /// A non-expiring token for a fresh principal.
    pub fn token(&self, subject: &str, tenant: &str, role: Role) -> String {
        self.state.tokens.issue(Principal::new(subject, tenant, role), None, Timestamp(0))
    }

    pub async fn call(&self, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = self.client.request(method, format!("{}{}", self.base, path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        let text = resp.text().await.unwrap();
        let value = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap_or(Value::String(text)) };
        (status, value)
    }

    pub async fn create(&self, token: &str) -> (StatusCode, Value) {
        self.call(Method::POST, "/api/sessions", Some(token), Some(serde_json::json!({ "image": DESKTOP }))).await
    }

    /// Creates a session and returns its id, panicking unless it is 201.
    pub async fn create_ok(&self, token: &str) -> u32 {
        let (status, body) = self.create(token).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["id"].as_u64().unwrap() as u32
    }

    pub async fn list(&self, token: &str) -> Vec<Value> {
        let (status, body) = self.call(Method::GET, "/api/sessions", Some(token), None).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body.as_array().unwrap().clone()
    }
}
