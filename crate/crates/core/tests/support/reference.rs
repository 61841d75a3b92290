//! Reference interpreter for lifecycle command sequences.
//!
//! Kept deliberately naive: its own transition table, its own port and id
//! bookkeeping, and the engine call list written out per command. The real
//! lifecycle is checked against it, never the other way round.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use simdesk_core::engine::{ContainerAction, EngineCall, FakeEngine, HostId};
use simdesk_core::lifecycle::{recover, EngineView, MemoryJournal};
use simdesk_core::routes::RecordingPublisher;
use simdesk_core::{
    Command, CommandKind, Lifecycle, LifecycleConfig, PrincipalId, ResourceLimits, SessionId, SessionSpec,
    SessionState, TenantId, Timestamp,
};

pub const IMAGE: &str = "simdesk/stub-desktop:1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefCmd {
    Create { ssh: bool, aux: bool },
    Suspend(u32),
    Resume(u32),
    Stop(u32),
    Start(u32),
    Destroy(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum St {
    Running,
    Suspended,
    Stopped,
    Destroyed,
}

#[derive(Debug, Clone)]
struct RefSession {
    state: St,
    container: String,
    ssh: Option<u16>,
}

#[derive(Debug, Clone, Default)]
pub struct RefModel {
    containers_made: u64,
    sessions: BTreeMap<u32, RefSession>,
    issued: BTreeSet<u32>,
}

impl RefModel {
    pub fn legal_commands(&self) -> Vec<RefCmd> {
        let mut out = Vec::new();
        if (1..=99).any(|i| !self.issued.contains(&i)) {
            for ssh in [false, true] {
                for aux in [false, true] {
                    out.push(RefCmd::Create { ssh, aux });
                }
            }
        }
        for (&id, s) in &self.sessions {
            match s.state {
                St::Running => out.extend([RefCmd::Suspend(id), RefCmd::Stop(id), RefCmd::Destroy(id)]),
                St::Suspended => out.extend([RefCmd::Resume(id), RefCmd::Destroy(id)]),
                St::Stopped => out.extend([RefCmd::Start(id), RefCmd::Destroy(id)]),
                St::Destroyed => {}
            }
        }
        out
    }

    /// Engine calls the command must produce.
    pub fn step(&mut self, cmd: RefCmd) -> Vec<EngineCall> {
        let action = |id: &str, action| EngineCall::Action { id: id.to_owned(), action };
        match cmd {
            RefCmd::Create { ssh, aux } => {
                let id = (1..=99).find(|i| !self.issued.contains(i)).expect("free id");
                self.issued.insert(id);
                let used: BTreeSet<u16> = self
                    .sessions
                    .values()
                    .filter(|s| s.state != St::Destroyed)
                    .filter_map(|s| s.ssh)
                    .collect();
                let ssh_port = ssh.then(|| (2200..=2299).find(|p| !used.contains(p)).expect("free ssh port"));
                let mut ports = vec![4000 + id as u16];
                if aux {
                    ports.push(9000 + id as u16);
                }
                ports.extend(ssh_port);
                self.containers_made += 1;
                let container = format!("{:012x}", self.containers_made);
                let calls = vec![
                    EngineCall::Create { host: HostId::from("host0"), image: IMAGE.into(), host_ports: ports },
                    action(&container, ContainerAction::Start),
                ];
                self.sessions.insert(id, RefSession { state: St::Running, container, ssh: ssh_port });
                calls
            }
            RefCmd::Suspend(id) => self.simple(id, St::Running, St::Suspended, &[ContainerAction::Pause]),
            RefCmd::Resume(id) => self.simple(id, St::Suspended, St::Running, &[ContainerAction::Unpause]),
            RefCmd::Stop(id) => self.simple(id, St::Running, St::Stopped, &[ContainerAction::Stop]),
            RefCmd::Start(id) => self.simple(id, St::Stopped, St::Running, &[ContainerAction::Start]),
            RefCmd::Destroy(id) => {
                let from = self.sessions[&id].state;
                let actions: &[ContainerAction] = match from {
                    St::Running => &[ContainerAction::Stop, ContainerAction::Remove],
                    St::Suspended => &[ContainerAction::Unpause, ContainerAction::Stop, ContainerAction::Remove],
                    St::Stopped => &[ContainerAction::Remove],
                    St::Destroyed => panic!("destroy of destroyed session generated"),
                };
                self.simple(id, from, St::Destroyed, actions)
            }
        }
    }

    fn simple(&mut self, id: u32, from: St, to: St, actions: &[ContainerAction]) -> Vec<EngineCall> {
        let s = self.sessions.get_mut(&id).expect("known session");
        assert_eq!(s.state, from, "generator produced an illegal command");
        s.state = to;
        actions.iter().map(|&a| EngineCall::Action { id: s.container.clone(), action: a }).collect()
    }

    /// Expected lifecycle state of every session the model knows.
    pub fn states(&self) -> BTreeMap<u32, SessionState> {
        self.sessions
            .iter()
            .map(|(&id, s)| {
                let st = match s.state {
                    St::Running => SessionState::Running,
                    St::Suspended => SessionState::Suspended,
                    St::Stopped => SessionState::Stopped,
                    St::Destroyed => SessionState::Destroyed,
                };
                (id, st)
            })
            .collect()
    }
}

/// Picks a legal command sequence: each choice indexes the legal set.
pub fn generate(choices: &[usize]) -> Vec<RefCmd> {
    let mut model = RefModel::default();
    let mut out = Vec::new();
    for &c in choices {
        let legal = model.legal_commands();
        let cmd = legal[c % legal.len()];
        model.step(cmd);
        out.push(cmd);
    }
    out
}

pub fn spec(ssh: bool, aux: bool) -> SessionSpec {
    SessionSpec {
        owner: PrincipalId::from("student1"),
        tenant: TenantId::from("course1"),
        image: IMAGE.into(),
        limits: ResourceLimits::new(1.0, ResourceLimits::GIB, false),
        stream_ssh: ssh,
        aux_bridge: aux,
        vehicles: 0,
    }
}

pub fn to_command(cmd: RefCmd, at: u64) -> Command {
    let sid = |i: u32| SessionId::new(i).expect("positive id");
    let kind = match cmd {
        RefCmd::Create { ssh, aux } => CommandKind::Create(spec(ssh, aux)),
        RefCmd::Suspend(i) => CommandKind::Suspend(sid(i)),
        RefCmd::Resume(i) => CommandKind::Resume(sid(i)),
        RefCmd::Stop(i) => CommandKind::Stop(sid(i)),
        RefCmd::Start(i) => CommandKind::Start(sid(i)),
        RefCmd::Destroy(i) => CommandKind::Destroy(sid(i)),
    };
    Command::new(kind, "student1", Timestamp(at))
}

pub async fn fresh_lifecycle() -> (Lifecycle, Arc<FakeEngine>, MemoryJournal, Arc<RecordingPublisher>) {
    let engine = Arc::new(FakeEngine::single_host(&[IMAGE]));
    let journal = MemoryJournal::default();
    let publisher = Arc::new(RecordingPublisher::default());
    let lc = Lifecycle::open(
        LifecycleConfig::default(),
        engine.clone(),
        publisher.clone(),
        Box::new(journal.clone()),
        Vec::new(),
    )
    .await
    .expect("default config is valid");
    (lc, engine, journal, publisher)
}

/// Runs `cmds` against a fresh lifecycle and the reference model. Returns a
/// description of the first disagreement, if any. `cuts` are journal prefix
/// lengths at which a crash is simulated and recovery checked.
pub async fn check_sequence(cmds: &[RefCmd], cuts: &[usize]) -> Result<(), String> {
    let (mut lc, engine, journal, publisher) = fresh_lifecycle().await;
    let mut model = RefModel::default();
    let mut expected_calls = Vec::new();
    let mut tables = vec![lc.sessions().clone()];
    let mut engine_states = vec![engine.snapshot()];

    for (i, &cmd) in cmds.iter().enumerate() {
        expected_calls.extend(model.step(cmd));
        let session = lc
            .apply_command(to_command(cmd, i as u64 + 1))
            .await
            .map_err(|e| format!("step {i} {cmd:?}: unexpected error {e}"))?;
        if session.last_error.is_some() {
            return Err(format!("step {i} {cmd:?}: engine error {:?}", session.last_error));
        }
        let calls = engine.calls();
        if calls != expected_calls {
            return Err(format!("step {i} {cmd:?}: call record\n  got      {calls:?}\n  expected {expected_calls:?}"));
        }
        let states: BTreeMap<u32, SessionState> = lc.sessions().iter().map(|(id, s)| (id.get(), s.state)).collect();
        if states != model.states() {
            return Err(format!("step {i} {cmd:?}: states {states:?}, expected {:?}", model.states()));
        }
        let routed: BTreeSet<String> = lc
            .sessions()
            .values()
            .filter(|s| s.state.is_routed())
            .map(|s| s.binding.as_ref().expect("routed sessions are bound").hostname.clone())
            .collect();
        let published: BTreeSet<String> =
            publisher.latest().map(|t| t.http_routes.into_keys().collect()).unwrap_or_default();
        if routed != published {
            return Err(format!("step {i} {cmd:?}: published {published:?}, routed {routed:?}"));
        }
        for s in lc.sessions().values() {
            s.check_invariants().map_err(|e| format!("step {i}: {e}"))?;
        }
        tables.push(lc.sessions().clone());
        engine_states.push(engine.snapshot());
    }

    let entries = journal.entries();
    if entries.len() != cmds.len() {
        return Err(format!("{} journal entries for {} commands", entries.len(), cmds.len()));
    }
    for &cut in cuts {
        let cut = cut.min(entries.len());
        let view: EngineView =
            FakeEngine::from_state(engine_states[cut].clone()).containers().into_iter().collect();
        let recovered = recover(&entries[..cut], &view).map_err(|e| format!("cut {cut}: {e}"))?;
        if recovered != tables[cut] {
            return Err(format!("cut {cut}: recovered table differs\n  got      {recovered:?}\n  expected {:?}", tables[cut]));
        }
        let restarted = Lifecycle::open(
            LifecycleConfig::default(),
            Arc::new(FakeEngine::from_state(engine_states[cut].clone())),
            Arc::new(RecordingPublisher::default()),
            Box::new(MemoryJournal::default()),
            entries[..cut].to_vec(),
        )
        .await
        .map_err(|e| format!("cut {cut}: reopen failed: {e}"))?;
        if restarted.sessions() != &tables[cut] {
            return Err(format!("cut {cut}: reopened lifecycle differs"));
        }
    }
    Ok(())
}
