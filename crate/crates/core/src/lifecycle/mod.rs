//! The single writer over sessions.
//!
//! [`Lifecycle`] turns commands into engine calls, allocator updates, journal
//! records and route publications. It is not shared: [`LifecycleHandle`] runs
//! it on its own task and serializes every command through one queue.

mod handle;
pub mod journal;
mod recover;
mod snapshot;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

pub use handle::{spawn_scheduler, Clock, LifecycleHandle, ManualClock, SystemClock};
pub use journal::{BindingDelta, ContainerSet, FileJournal, JournalEntry, JournalError, JournalSink, MemoryJournal};
pub use recover::{recover, replay, EngineView};
pub use snapshot::{SnapshotAction, SnapshotPolicy};

use crate::allocator::{
    AllocError, Allocator, AllocatorConfig, PortBinding, Wants, AUX_CONTAINER_PORT, SSH_CONTAINER_PORT,
};
use crate::engine::{ContainerAction, ContainerConfig, ContainerRef, Engine, EngineError, EngineStatus, HostId};
use crate::placement::{self, HostDescriptor, PlacementError, UnitKind, WorkloadUnit};
use crate::routes::{Backend, PublishError, RoutePublisher, RouteTable};
use crate::session::{
    transition, IllegalTransition, ImageRef, LifecycleEvent, PrincipalId, ResourceLimits, Session, SessionId,
    SessionSpec, SessionState, TenantId, Timestamp,
};

pub type SessionTable = BTreeMap<SessionId, Session>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "arg")]
pub enum CommandKind {
    Create(SessionSpec),
    Suspend(SessionId),
    Resume(SessionId),
    Stop(SessionId),
    Start(SessionId),
    Destroy(SessionId),
}

impl CommandKind {
    pub fn target(&self) -> Option<SessionId> {
        match self {
            CommandKind::Create(_) => None,
            CommandKind::Suspend(id)
            | CommandKind::Resume(id)
            | CommandKind::Stop(id)
            | CommandKind::Start(id)
            | CommandKind::Destroy(id) => Some(*id),
        }
    }

    pub fn event(&self) -> LifecycleEvent {
        match self {
            CommandKind::Create(_) => LifecycleEvent::Provisioned,
            CommandKind::Suspend(_) => LifecycleEvent::Suspend,
            CommandKind::Resume(_) => LifecycleEvent::Resume,
            CommandKind::Stop(_) => LifecycleEvent::Stop,
            CommandKind::Start(_) => LifecycleEvent::Start,
            CommandKind::Destroy(_) => LifecycleEvent::Destroy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub kind: CommandKind,
    pub issued_by: PrincipalId,
    pub at: Timestamp,
}

impl Command {
    pub fn new(kind: CommandKind, issued_by: impl Into<PrincipalId>, at: Timestamp) -> Command {
        Command { kind, issued_by: issued_by.into(), at }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LifecycleError {
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error("no session {0}")]
    UnknownSession(SessionId),
    #[error("no free session slot: {0}")]
    AllocatorExhausted(String),
    #[error("invalid session spec: {0}")]
    InvalidSpec(String),
    #[error("engine error on session {session}: {error}")]
    Engine { session: SessionId, error: EngineError },
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("invalid lifecycle configuration: {0}")]
    Config(String),
    #[error("lifecycle writer has shut down")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifecycleConfig {
    pub allocator: AllocatorConfig,
    pub hosts: Vec<HostDescriptor>,
    /// Hostname domain per tenant; tenants not listed use the allocator domain.
    pub tenant_domains: BTreeMap<TenantId, String>,
    /// Network for single-container sessions.
    pub network: String,
    /// Image run for each vehicle of a multi-vehicle session.
    pub sitl_image: String,
    pub vehicle_limits: ResourceLimits,
    /// Let Create reuse the ids of destroyed sessions.
    pub reuse_ids: bool,
    pub snapshot: SnapshotPolicy,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        LifecycleConfig {
            allocator: AllocatorConfig::default(),
            hosts: vec![HostDescriptor {
                id: HostId::from("host0"),
                cpu_capacity: 16.0,
                mem_capacity: 64 * ResourceLimits::GIB,
                has_gpu: true,
                overlay: "simdesk-overlay".into(),
                address: "127.0.0.1".into(),
            }],
            tenant_domains: BTreeMap::new(),
            network: "bridge".into(),
            sitl_image: "simdesk/stub-sitl:latest".into(),
            vehicle_limits: ResourceLimits::new(1.0, ResourceLimits::GIB, false),
            reuse_ids: false,
            snapshot: SnapshotPolicy::default(),
        }
    }
}

impl LifecycleConfig {
    pub fn validate(&self) -> Result<(), LifecycleError> {
        self.allocator.validate().map_err(|e| LifecycleError::Config(e.to_string()))?;
        self.snapshot.validate().map_err(LifecycleError::Config)?;
        if self.hosts.is_empty() {
            return Err(LifecycleError::Config("at least one engine host is required".into()));
        }
        let ids: BTreeSet<_> = self.hosts.iter().map(|h| &h.id).collect();
        if ids.len() != self.hosts.len() {
            return Err(LifecycleError::Config("duplicate host id".into()));
        }
        if ImageRef::parse(&self.sitl_image).is_none() {
            return Err(LifecycleError::Config(format!("bad sitl image {:?}", self.sitl_image)));
        }
        if !self.vehicle_limits.is_well_formed() {
            return Err(LifecycleError::Config("vehicle limits must be positive".into()));
        }
        Ok(())
    }

    fn host(&self, id: &HostId) -> Option<&HostDescriptor> {
        self.hosts.iter().find(|h| &h.id == id)
    }
}

/// Engine calls that take one container from `status` to removed.
pub fn teardown_actions(status: EngineStatus) -> &'static [ContainerAction] {
    use ContainerAction::*;
    match status {
        EngineStatus::Created | EngineStatus::Exited => &[Remove],
        EngineStatus::Running => &[Stop, Remove],
        EngineStatus::Paused => &[Unpause, Stop, Remove],
        EngineStatus::Removed => &[],
    }
}

fn status_for(state: SessionState) -> Option<EngineStatus> {
    match state {
        SessionState::Running => Some(EngineStatus::Running),
        SessionState::Suspended => Some(EngineStatus::Paused),
        SessionState::Stopped => Some(EngineStatus::Exited),
        _ => None,
    }
}

/// Outcome of the engine side of a command.
struct Effect {
    containers: Option<ContainerSet>,
    error: Option<String>,
}

pub struct Lifecycle {
    cfg: LifecycleConfig,
    engine: Arc<dyn Engine>,
    publisher: Arc<dyn RoutePublisher>,
    journal: Box<dyn JournalSink>,
    allocator: Allocator,
    sessions: SessionTable,
    issued: BTreeSet<SessionId>,
    next_sequence: u64,
    generation: u64,
    published: Option<(BTreeMap<String, Backend>, BTreeMap<u16, Backend>)>,
    snapshot_window: Option<chrono::NaiveDate>,
}

impl Lifecycle {
    /// Builds the writer from existing journal `entries` (empty for a fresh
    /// start). Containers named by the journal are inspected; any that are
    /// missing or in the wrong status put their session in Failed.
    pub async fn open(
        cfg: LifecycleConfig,
        engine: Arc<dyn Engine>,
        publisher: Arc<dyn RoutePublisher>,
        journal: Box<dyn JournalSink>,
        entries: Vec<JournalEntry>,
    ) -> Result<Lifecycle, LifecycleError> {
        cfg.validate()?;
        let allocator = Allocator::new(cfg.allocator.clone()).map_err(|e| LifecycleError::Config(e.to_string()))?;
        let generation = publisher.current_generation();
        let mut lc = Lifecycle {
            cfg,
            engine,
            publisher,
            journal,
            allocator,
            sessions: SessionTable::new(),
            issued: BTreeSet::new(),
            next_sequence: entries.len() as u64 + 1,
            generation,
            published: None,
            snapshot_window: None,
        };
        if !entries.is_empty() {
            let replayed = replay(&entries)?;
            let mut view = EngineView::new();
            for s in replayed.values().filter(|s| s.state.has_container()) {
                for c in s.containers() {
                    if let Ok(info) = lc.engine.inspect(c).await {
                        view.insert(c.clone(), info.status);
                    }
                }
            }
            lc.sessions = recover(&entries, &view)?;
            for s in lc.sessions.values() {
                lc.issued.insert(s.id);
                if let Some(b) = &s.binding {
                    lc.allocator.restore(b.clone()).map_err(|e| LifecycleError::Config(e.to_string()))?;
                }
            }
        }
        lc.sync_routes();
        Ok(lc)
    }

    pub fn config(&self) -> &LifecycleConfig {
        &self.cfg
    }

    pub fn sessions(&self) -> &SessionTable {
        &self.sessions
    }

    pub fn allocator(&self) -> &Allocator {
        &self.allocator
    }

    /// Sequence number the next journal entry will carry.
    pub fn next_sequence(&self) -> u64 {
        self.next_sequence
    }

    pub async fn apply_command(&mut self, cmd: Command) -> Result<Session, LifecycleError> {
        let result = match &cmd.kind {
            CommandKind::Create(spec) => self.create(&cmd, spec).await,
            _ => self.act(&cmd).await,
        };
        self.sync_routes();
        result
    }

    fn choose_id(&self) -> Option<SessionId> {
        (1..=self.cfg.allocator.max_sessions).filter_map(SessionId::new).find(|id| {
            let live = self.sessions.get(id).is_some_and(|s| s.state != SessionState::Destroyed);
            !live && !self.allocator.is_bound(*id) && (self.cfg.reuse_ids || !self.issued.contains(id))
        })
    }

    async fn create(&mut self, cmd: &Command, spec: &SessionSpec) -> Result<Session, LifecycleError> {
        if ImageRef::parse(&spec.image).is_none() {
            return Err(LifecycleError::InvalidSpec(format!("bad image reference {:?}", spec.image)));
        }
        if !spec.limits.is_well_formed() {
            return Err(LifecycleError::InvalidSpec("limits must be positive".into()));
        }
        let id = self
            .choose_id()
            .ok_or_else(|| LifecycleError::AllocatorExhausted(format!("all {} ids used", self.cfg.allocator.max_sessions)))?;
        let domain = self.cfg.tenant_domains.get(&spec.tenant).cloned();
        let wants = Wants { ssh: spec.stream_ssh, aux: spec.aux_bridge };
        let binding = self.allocator.allocate(id, wants, domain.as_deref()).map_err(|e| match e {
            AllocError::IdOutOfRange(..) | AllocError::StreamRangeExhausted => {
                LifecycleError::AllocatorExhausted(e.to_string())
            }
            other => LifecycleError::Config(other.to_string()),
        })?;
        self.issued.insert(id);

        let effect = self.provision(spec, &binding).await;
        let state = if effect.error.is_some() { SessionState::Failed } else { SessionState::Running };
        let entry = JournalEntry {
            sequence: self.next_sequence,
            command: cmd.clone(),
            session: id,
            resulting_state: state,
            binding: Some(BindingDelta::Bound(binding)),
            containers: effect.containers,
            error: effect.error,
        };
        if let Err(e) = self.commit(&entry) {
            self.allocator.release(id);
            return Err(e);
        }
        Ok(self.sessions[&id].clone())
    }

    /// Creates and starts the session's containers. Stops at the first error
    /// and reports whatever was created so far.
    async fn provision(&self, spec: &SessionSpec, binding: &PortBinding) -> Effect {
        let mut set = ContainerSet::default();
        let result = self.provision_into(spec, binding, &mut set).await;
        Effect { containers: Some(set), error: result.err() }
    }

    async fn provision_into(&self, spec: &SessionSpec, binding: &PortBinding, set: &mut ContainerSet) -> Result<(), String> {
        let desktop_cfg = |network: &str| {
            let mut c = ContainerConfig::new(&spec.image, spec.limits.memory_bytes, spec.limits.cpu_cores, network)
                .with_port(binding.web_container_port, binding.web_host_port);
            if let Some(p) = binding.aux_bridge_port {
                c = c.with_port(AUX_CONTAINER_PORT, p);
            }
            if let Some(p) = binding.ssh_stream_port {
                c = c.with_port(SSH_CONTAINER_PORT, p);
            }
            c
        };

        if spec.vehicles == 0 {
            let host = self
                .cfg
                .hosts
                .iter()
                .find(|h| h.has_gpu)
                .or_else(|| (!spec.limits.gpu_required).then(|| &self.cfg.hosts[0]))
                .ok_or("no GPU host for a session that requires one")?;
            let cfg = desktop_cfg(&self.cfg.network);
            let r = self.engine.create_container(&cfg, &host.id).await.map_err(|e| e.to_string())?;
            set.renderer = Some(r.clone());
            self.engine.lifecycle_action(&r, ContainerAction::Start).await.map_err(|e| e.to_string())?;
            return Ok(());
        }

        let mut units = vec![WorkloadUnit::renderer(spec.limits.cpu_cores, spec.limits.memory_bytes)];
        units.extend(
            (0..spec.vehicles)
                .map(|i| WorkloadUnit::vehicle(i, self.cfg.vehicle_limits.cpu_cores, self.cfg.vehicle_limits.memory_bytes)),
        );
        let plan = placement::plan(&self.cfg.hosts, &units).map_err(|e: PlacementError| e.to_string())?;
        if !plan.feasible {
            return Err(format!("no feasible placement for {} vehicles", spec.vehicles));
        }
        let overlay = self.cfg.hosts[0].overlay.clone();
        for a in &plan.assignment {
            let cfg = match a.unit.kind {
                UnitKind::Renderer => desktop_cfg(&overlay),
                UnitKind::VehicleSitl => ContainerConfig::new(
                    &self.cfg.sitl_image,
                    self.cfg.vehicle_limits.memory_bytes,
                    self.cfg.vehicle_limits.cpu_cores,
                    &overlay,
                ),
            };
            let r = self.engine.create_container(&cfg, &a.host).await.map_err(|e| e.to_string())?;
            match a.unit.kind {
                UnitKind::Renderer => set.renderer = Some(r.clone()),
                UnitKind::VehicleSitl => set.workers.push(r.clone()),
            }
            self.engine.lifecycle_action(&r, ContainerAction::Start).await.map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    async fn act(&mut self, cmd: &Command) -> Result<Session, LifecycleError> {
        let id = cmd.kind.target().expect("non-create command");
        let session = match self.sessions.get(&id) {
            Some(s) if s.state != SessionState::Destroyed || matches!(cmd.kind, CommandKind::Destroy(_)) => s.clone(),
            _ => return Err(LifecycleError::UnknownSession(id)),
        };
        let event = cmd.kind.event();
        let next = transition(session.state, event)?;

        let outcome = self.drive(&session, event).await;
        let (state, error) = match outcome {
            Ok(()) => (next, None),
            Err(error) => match transition(session.state, LifecycleEvent::Fail) {
                Ok(failed) => (failed, Some(error.to_string())),
                Err(_) => return Err(LifecycleError::Engine { session: id, error }),
            },
        };
        let binding = (state == SessionState::Destroyed).then_some(BindingDelta::Released);
        let entry = JournalEntry {
            sequence: self.next_sequence,
            command: cmd.clone(),
            session: id,
            resulting_state: state,
            binding,
            containers: None,
            error,
        };
        self.commit(&entry)?;
        if state == SessionState::Destroyed {
            self.allocator.release(id);
        }
        Ok(self.sessions[&id].clone())
    }

    /// Engine calls for `event` on every container of `session`, renderer first.
    async fn drive(&self, session: &Session, event: LifecycleEvent) -> Result<(), EngineError> {
        let containers: Vec<ContainerRef> = session.containers().cloned().collect();
        for c in &containers {
            let actions: Vec<ContainerAction> = match event {
                LifecycleEvent::Suspend => vec![ContainerAction::Pause],
                LifecycleEvent::Resume => vec![ContainerAction::Unpause],
                LifecycleEvent::Stop => vec![ContainerAction::Stop],
                LifecycleEvent::Start => vec![ContainerAction::Start],
                LifecycleEvent::Destroy => {
                    let status = match status_for(session.state) {
                        Some(s) => s,
                        None => match self.engine.inspect(c).await {
                            Ok(info) => info.status,
                            Err(EngineError::NotFound(_)) => continue,
                            Err(e) => return Err(e),
                        },
                    };
                    teardown_actions(status).to_vec()
                }
                LifecycleEvent::Provisioned | LifecycleEvent::Fail => vec![],
            };
            for action in actions {
                match self.engine.lifecycle_action(c, action).await {
                    Ok(_) => {}
                    Err(EngineError::NotFound(_)) if event == LifecycleEvent::Destroy => break,
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }

    /// Journals `entry`, then applies it to the in-memory table.
    fn commit(&mut self, entry: &JournalEntry) -> Result<(), LifecycleError> {
        self.journal.append(entry)?;
        self.next_sequence += 1;
        recover::apply_entry(&mut self.sessions, entry)
            .expect("live entries always apply to the live table");
        Ok(())
    }

    /// The routes the session table calls for.
    pub fn desired_routes(&self) -> (BTreeMap<String, Backend>, BTreeMap<u16, Backend>) {
        let mut http = BTreeMap::new();
        let mut stream = BTreeMap::new();
        for s in self.sessions.values().filter(|s| s.state.is_routed()) {
            let (Some(b), Some(c)) = (&s.binding, &s.container) else { continue };
            let address = self.cfg.host(&c.host).map_or("127.0.0.1", |h| h.address.as_str());
            http.insert(b.hostname.to_ascii_lowercase(), Backend::new(address, b.web_host_port));
            if let Some(p) = b.ssh_stream_port {
                stream.insert(p, Backend::new(address, p));
            }
        }
        (http, stream)
    }

    /// Publishes the desired routes if they differ from the last published
    /// set. A failed publish is retried after the next command.
    fn sync_routes(&mut self) {
        let desired = self.desired_routes();
        if self.published.as_ref() == Some(&desired) {
            return;
        }
        let generation = self.generation.max(self.publisher.current_generation()) + 1;
        let table = RouteTable { http_routes: desired.0.clone(), stream_routes: desired.1.clone(), generation };
        match self.publisher.publish(table) {
            Ok(()) => {
                self.generation = generation;
                self.published = Some(desired);
            }
            Err(e) => {
                if let PublishError::StaleGeneration { current, .. } = &e {
                    self.generation = *current;
                }
                tracing::error!(error = %e, "route publication failed");
            }
        }
    }

    /// Runs the nightly snapshot for the window containing `now`. A second
    /// call in the same window does nothing.
    pub async fn tick_scheduler(&mut self, now: NaiveDateTime) -> Vec<SnapshotAction> {
        let policy = self.cfg.snapshot.clone();
        let window = policy.window(now);
        if self.snapshot_window.is_some_and(|w| w >= window) {
            return Vec::new();
        }
        self.snapshot_window = Some(window);

        let mut actions = Vec::new();
        let live: Vec<(SessionId, ContainerRef)> = self
            .sessions
            .values()
            .filter(|s| s.state.is_routed())
            .filter_map(|s| s.container.clone().map(|c| (s.id, c)))
            .collect();
        for (id, renderer) in live {
            let image = policy.image(id, window);
            match self.engine.commit_image(&renderer, &image).await {
                Ok(image) => actions.push(SnapshotAction::Committed { session: id, image }),
                Err(e) => actions.push(SnapshotAction::CommitFailed { session: id, error: e.to_string() }),
            }
            let images = match self.engine.list_images(&renderer.host, &policy.repository(id)).await {
                Ok(images) => images,
                Err(e) => {
                    actions.push(SnapshotAction::ListFailed { session: id, error: e.to_string() });
                    continue;
                }
            };
            let mut dated: Vec<_> = images
                .into_iter()
                .filter_map(|i| policy.date_of(id, &i).map(|d| (d, i)))
                .collect();
            dated.sort();
            let excess = dated.len().saturating_sub(policy.retention as usize);
            for (_, image) in dated.into_iter().take(excess) {
                match self.engine.remove_image(&renderer.host, &image).await {
                    Ok(()) => actions.push(SnapshotAction::Deleted { session: id, image }),
                    Err(e) => {
                        actions.push(SnapshotAction::DeleteFailed { session: id, image, error: e.to_string() })
                    }
                }
            }
        }
        actions
    }
}
