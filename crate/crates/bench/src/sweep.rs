//! Load sweeps: stand up N sessions, replay against one, repeat per level.

use std::sync::Arc;

use async_trait::async_trait;
use simdesk_core::lifecycle::MemoryJournal;
use simdesk_core::routes::RecordingPublisher;
use simdesk_core::{
    Command, CommandKind, FakeEngine, Lifecycle, LifecycleConfig, LifecycleError, ResourceLimits,
    SessionId, SessionSpec, SessionState, Timestamp,
};
use simdesk_rfb::{serve_fixture, Fixture, ResponseDelay, ServerFixtureConfig};
use tokio::net::TcpListener;

use crate::replay::{replay_endpoint, Endpoint, ReplayError, ReplayOptions};
use crate::report::{LatencyReport, ReportError, DEFAULT_PERCENTILES};
use crate::trace::EventTrace;

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("session setup: {0}")]
    Setup(String),
}

/// Brings up `n` concurrent sessions and returns the endpoint of the one to
/// measure.
#[async_trait]
pub trait SessionFactory: Send {
    async fn stand_up(&mut self, n: usize) -> Result<Endpoint, SweepError>;

    async fn tear_down(&mut self) -> Result<(), SweepError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub level: usize,
    pub report: LatencyReport,
}

/// Runs `trace` once per load level. A level whose events were all skipped
/// still yields a report (with an empty CDF).
pub async fn sweep<F>(levels: &[usize], factory: &mut F, trace: &EventTrace, opts: ReplayOptions) -> Result<Vec<LevelReport>, SweepError>
where
    F: SessionFactory + ?Sized,
{
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let endpoint = factory.stand_up(level).await?;
        tracing::info!(level, %endpoint, "replaying");
        let result = replay_endpoint(&endpoint, trace, opts).await;
        factory.tear_down().await?;
        let report = LatencyReport::from_samples(result?, &DEFAULT_PERCENTILES)?.with_label(format!("{level} sessions"));
        out.push(LevelReport { level, report });
    }
    Ok(out)
}

/// Delay model: the fixture's response delay given the number of sessions.
pub type DelayModel = Box<dyn Fn(usize) -> ResponseDelay + Send + Sync>;

/// Load-proportional per-event delays: at level `n`, event `i` takes
/// `n * (1 + i mod 5)` ms.
pub fn proportional_delays(unit_ms: u64) -> DelayModel {
    Box::new(move |n| {
        ResponseDelay::PerSample((0..5u64).map(|i| std::time::Duration::from_millis(unit_ms * n as u64 * (1 + i))).collect())
    })
}

/// Creates stub sessions through a lifecycle backed by the in-memory engine,
/// and serves a fixture for the measured session whose delay depends on the
/// level.
pub struct LifecycleFactory {
    lifecycle: Lifecycle,
    engine: Arc<FakeEngine>,
    spec: SessionSpec,
    delay: DelayModel,
    fixture: ServerFixtureConfig,
    live: Vec<SessionId>,
    running: Option<Fixture>,
    clock: u64,
}

pub const STUB_IMAGE: &str = "simdesk/stub-desktop:latest";

impl LifecycleFactory {
    pub async fn new(delay: DelayModel) -> Result<LifecycleFactory, SweepError> {
        let engine = Arc::new(FakeEngine::single_host(&[STUB_IMAGE]));
        let lifecycle = Lifecycle::open(
            LifecycleConfig::default(),
            engine.clone(),
            Arc::new(RecordingPublisher::default()),
            Box::new(MemoryJournal::default()),
            Vec::new(),
        )
        .await?;
        let spec = SessionSpec {
            owner: "bench".into(),
            tenant: "bench".into(),
            image: STUB_IMAGE.into(),
            limits: ResourceLimits::new(1.0, ResourceLimits::GIB, false),
            stream_ssh: false,
            aux_bridge: false,
            vehicles: 0,
        };
        Ok(LifecycleFactory {
            lifecycle,
            engine,
            spec,
            delay,
            fixture: ServerFixtureConfig::default(),
            live: Vec::new(),
            running: None,
            clock: 0,
        })
    }

    pub fn with_fixture(mut self, cfg: ServerFixtureConfig) -> Self {
        self.fixture = cfg;
        self
    }

    pub fn lifecycle(&self) -> &Lifecycle {
        &self.lifecycle
    }

    pub fn engine(&self) -> &FakeEngine {
        &self.engine
    }

    fn command(&mut self, kind: CommandKind) -> Command {
        self.clock += 1;
        Command::new(kind, "bench", Timestamp(self.clock))
    }
}

#[async_trait]
impl SessionFactory for LifecycleFactory {
    async fn stand_up(&mut self, n: usize) -> Result<Endpoint, SweepError> {
        for _ in 0..n {
            let cmd = self.command(CommandKind::Create(self.spec.clone()));
            let session = self.lifecycle.apply_command(cmd).await?;
            self.live.push(session.id);
            if session.state != SessionState::Running {
                return Err(SweepError::Setup(format!("session {} ended {:?}", session.id, session.state)));
            }
        }
        let cfg = ServerFixtureConfig { delay: (self.delay)(n), ..self.fixture.clone() };
        let listener = TcpListener::bind("127.0.0.1:0").await.map_err(|e| SweepError::Setup(e.to_string()))?;
        let fixture = serve_fixture(cfg, listener).map_err(|e| SweepError::Setup(e.to_string()))?;
        let addr = fixture.local_addr();
        self.running = Some(fixture);
        Ok(Endpoint::Tcp(addr))
    }

    async fn tear_down(&mut self) -> Result<(), SweepError> {
        self.running = None;
        for id in std::mem::take(&mut self.live) {
            let cmd = self.command(CommandKind::Destroy(id));
            self.lifecycle.apply_command(cmd).await?;
        }
        Ok(())
    }
}
