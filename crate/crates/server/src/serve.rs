//! Wiring for `simdesk serve`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use simdesk_core::engine::{DockerEngine, EngineEndpoint};
use simdesk_core::lifecycle::{spawn_scheduler, Clock, FileJournal, JournalSink, MemoryJournal, SystemClock};
use simdesk_core::routes::RecordingPublisher;
use simdesk_core::{Engine, FakeEngine, Lifecycle, LifecycleHandle, RoutePublisher, Timestamp};
use simdesk_gateway::{Gateway, GatewayConfig, TlsMaterial};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::api::{router, ApiState};
use crate::config::{EngineSection, ServerConfig};
use crate::identity::IdentityHook;
use crate::reports::ReportStore;

/// A started server. Dropping it stops the API listener and scheduler.
pub struct Running {
    pub api_addr: SocketAddr,
    pub gateway: Option<Gateway>,
    pub state: Arc<ApiState>,
    tasks: Vec<JoinHandle<()>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

fn build_engine(cfg: &ServerConfig) -> anyhow::Result<Arc<dyn Engine>> {
    Ok(match &cfg.engine {
        EngineSection::Fake { images } => {
            let images: Vec<&str> = images.iter().map(String::as_str).collect();
            Arc::new(FakeEngine::new(cfg.lifecycle.hosts.iter().map(|h| h.id.0.as_str()), &images))
        }
        EngineSection::Docker { endpoints, api_version } => {
            let mut parsed = BTreeMap::new();
            for (host, ep) in endpoints {
                parsed.insert(host.clone(), ep.parse::<EngineEndpoint>().map_err(anyhow::Error::msg)?);
            }
            Arc::new(DockerEngine::new(parsed, api_version.clone()))
        }
    })
}

async fn build_gateway(cfg: &ServerConfig) -> anyhow::Result<Option<Gateway>> {
    let Some(g) = &cfg.gateway else { return Ok(None) };
    let tls = match (&g.tls_cert, &g.tls_key) {
        (Some(cert), Some(key)) => Some(TlsMaterial::from_files(cert, key).context("loading gateway TLS material")?),
        _ => None,
    };
    let gw = Gateway::start(GatewayConfig { http_addr: g.listen, stream_ip: g.stream_ip, tls })
        .await
        .context("starting gateway")?;
    Ok(Some(gw))
}

/// Starts the gateway, lifecycle, snapshot scheduler and API listener.
pub async fn start(cfg: ServerConfig) -> anyhow::Result<Running> {
    cfg.validate()?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::default());
    let engine = build_engine(&cfg)?;
    let gateway = build_gateway(&cfg).await?;
    let publisher: Arc<dyn RoutePublisher> = match &gateway {
        Some(gw) => Arc::new(gw.clone()),
        None => Arc::new(RecordingPublisher::default()),
    };
    let (journal, entries): (Box<dyn JournalSink>, _) = match &cfg.api.journal {
        Some(path) => {
            let (j, entries) = FileJournal::open(path).with_context(|| format!("opening journal {}", path.display()))?;
            tracing::info!(path = %path.display(), entries = entries.len(), "journal opened");
            (Box::new(j), entries)
        }
        None => (Box::new(MemoryJournal::default()), Vec::new()),
    };
    let lifecycle = Lifecycle::open(cfg.lifecycle_config(), engine, publisher, journal, entries).await?;
    let (handle, _writer) = LifecycleHandle::spawn(lifecycle);
    let scheduler = spawn_scheduler(handle.clone(), clock.clone(), Duration::from_secs(cfg.api.snapshot_check_secs));

    let mut state = ApiState::new(
        handle,
        cfg.tenants.clone(),
        cfg.lifecycle.hosts.clone(),
        cfg.lifecycle.vehicle_limits,
        clock,
    );
    if let Some(dir) = &cfg.api.reports_dir {
        state = state.with_reports(ReportStore::with_dir(dir));
    }
    if let Some(hook) = &cfg.identity_hook {
        state = state.with_identity_hook(IdentityHook::new(hook));
    }
    for t in &cfg.tokens {
        let expires = t.expires_at.map(|at| Timestamp(at.timestamp_millis().max(0) as u64));
        state.tokens.insert(&t.token, crate::auth::Principal::new(&t.subject, &t.tenant.0, t.role), expires);
    }
    let state = Arc::new(state);

    let listener = TcpListener::bind(cfg.api.listen).await.with_context(|| format!("binding {}", cfg.api.listen))?;
    let api_addr = listener.local_addr()?;
    let app = router(state.clone());
    let api = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "api server stopped");
        }
    });
    tracing::info!(%api_addr, "api listening");
    Ok(Running { api_addr, gateway, state, tasks: vec![api, scheduler] })
}

/// Runs until interrupted.
pub async fn run(cfg: ServerConfig) -> anyhow::Result<()> {
    let _running = start(cfg).await?;
    tokio::signal::ctrl_c().await.context("waiting for interrupt")?;
    tracing::info!("shutting down");
    Ok(())
}
