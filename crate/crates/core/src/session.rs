//! Session domain types and the lifecycle state machine.
//!
//! Everything here is an immutable value. The only mutation of sessions
//! happens inside [`crate::lifecycle`], which applies [`transition`] to decide
//! whether a command is legal before touching the engine.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::allocator::PortBinding;
use crate::engine::ContainerRef;

/// Whole-number simulation identifier. Always `>= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct SessionId(u32);

impl SessionId {
    pub fn new(value: u32) -> Option<SessionId> {
        (value >= 1).then_some(SessionId(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for SessionId {
    type Error = String;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        SessionId::new(value).ok_or_else(|| format!("session id must be >= 1, got {value}"))
    }
}

impl From<SessionId> for u32 {
    fn from(id: SessionId) -> u32 {
        id.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// User identifier as asserted by the authentication layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrincipalId(pub String);

impl fmt::Display for PrincipalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PrincipalId {
    fn from(s: &str) -> Self {
        PrincipalId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TenantId(pub String);

impl fmt::Display for TenantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for PrincipalId {
    fn from(s: String) -> Self {
        PrincipalId(s)
    }
}

impl From<&str> for TenantId {
    fn from(s: &str) -> Self {
        TenantId(s.to_owned())
    }
}

/// Milliseconds on the control plane's monotonic clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

/// Per-session compute budget, mirrored onto the container's cgroup limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub cpu_cores: f64,
    pub memory_bytes: u64,
    #[serde(default)]
    pub gpu_required: bool,
}

impl ResourceLimits {
    pub const GIB: u64 = 1 << 30;

    pub fn new(cpu_cores: f64, memory_bytes: u64, gpu_required: bool) -> ResourceLimits {
        ResourceLimits { cpu_cores, memory_bytes, gpu_required }
    }

    pub fn is_well_formed(&self) -> bool {
        self.cpu_cores.is_finite() && self.cpu_cores > 0.0 && self.memory_bytes > 0
    }
}

/// What a user asks for when creating a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub owner: PrincipalId,
    pub tenant: TenantId,
    pub image: String,
    pub limits: ResourceLimits,
    /// Open a raw TCP stream port for the container's SSH server.
    #[serde(default)]
    pub stream_ssh: bool,
    /// Publish the container's game-engine bridge port.
    #[serde(default)]
    pub aux_bridge: bool,
    /// Number of vehicle SITL units to distribute across hosts. Zero means a
    /// single desktop container.
    #[serde(default)]
    pub vehicles: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SessionState {
    Requested,
    Running,
    Suspended,
    Stopped,
    Failed,
    Destroyed,
}

impl SessionState {
    pub const ALL: [SessionState; 6] = [
        SessionState::Requested,
        SessionState::Running,
        SessionState::Suspended,
        SessionState::Stopped,
        SessionState::Failed,
        SessionState::Destroyed,
    ];

    /// States in which the session owns a live container and a port binding.
    pub fn has_container(self) -> bool {
        matches!(self, SessionState::Running | SessionState::Suspended | SessionState::Stopped)
    }

    /// States whose web route is published on the gateway. A suspended
    /// desktop still answers with its frozen frame.
    pub fn is_routed(self) -> bool {
        matches!(self, SessionState::Running | SessionState::Suspended)
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LifecycleEvent {
    Provisioned,
    Suspend,
    Resume,
    Stop,
    Start,
    Destroy,
    Fail,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 7] = [
        LifecycleEvent::Provisioned,
        LifecycleEvent::Suspend,
        LifecycleEvent::Resume,
        LifecycleEvent::Stop,
        LifecycleEvent::Start,
        LifecycleEvent::Destroy,
        LifecycleEvent::Fail,
    ];
}

impl fmt::Display for LifecycleEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition: {event} in state {state}")]
pub struct IllegalTransition {
    pub state: SessionState,
    pub event: LifecycleEvent,
}

/// Successor state for `event` applied in `state`.
pub fn transition(state: SessionState, event: LifecycleEvent) -> Result<SessionState, IllegalTransition> {
    use LifecycleEvent as E;
    use SessionState as S;

    let next = match (state, event) {
        (S::Requested, E::Provisioned) => S::Running,
        (S::Running, E::Suspend) => S::Suspended,
        (S::Suspended, E::Resume) => S::Running,
        (S::Running, E::Stop) => S::Stopped,
        (S::Stopped, E::Start) => S::Running,
        (S::Running | S::Suspended | S::Stopped | S::Failed, E::Destroy) => S::Destroyed,
        (S::Requested | S::Running | S::Suspended, E::Fail) => S::Failed,
        _ => return Err(IllegalTransition { state, event }),
    };
    Ok(next)
}

/// Field of a [`SessionSpec`] that failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecViolation {
    CpuCores,
    MemoryBytes,
    GpuRequired,
    Image,
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpecViolation::CpuCores => "cpu_cores",
            SpecViolation::MemoryBytes => "memory_bytes",
            SpecViolation::GpuRequired => "gpu_required",
            SpecViolation::Image => "image",
        })
    }
}

/// Checks `spec` against a tenant quota. Every violated field is reported.
pub fn validate_spec(spec: &SessionSpec, tenant_quota: &ResourceLimits) -> Result<(), Vec<SpecViolation>> {
    let mut violations = Vec::new();
    let limits = &spec.limits;

    if !(limits.cpu_cores.is_finite() && limits.cpu_cores > 0.0 && limits.cpu_cores <= tenant_quota.cpu_cores) {
        violations.push(SpecViolation::CpuCores);
    }
    if limits.memory_bytes == 0 || limits.memory_bytes > tenant_quota.memory_bytes {
        violations.push(SpecViolation::MemoryBytes);
    }
    if limits.gpu_required && !tenant_quota.gpu_required {
        violations.push(SpecViolation::GpuRequired);
    }
    if ImageRef::parse(&spec.image).is_none() {
        violations.push(SpecViolation::Image);
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// A parsed `name[:tag]` image reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef<'a> {
    pub name: &'a str,
    pub tag: Option<&'a str>,
}

impl<'a> ImageRef<'a> {
    pub fn parse(reference: &'a str) -> Option<ImageRef<'a>> {
        // The tag separator is the last ':' after the last '/', so that a
        // registry port (`host:5000/img`) is not mistaken for a tag.
        let slash = reference.rfind('/').map_or(0, |i| i + 1);
        let (name, tag) = match reference[slash..].rfind(':') {
            Some(i) => (&reference[..slash + i], Some(&reference[slash + i + 1..])),
            None => (reference, None),
        };

        let name_ok = !name.is_empty()
            && !name.starts_with('/')
            && !name.ends_with('/')
            && name.split('/').all(|part| {
                !part.is_empty()
                    && part.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | ':'))
            });
        let tag_ok = tag.is_none_or(|t| {
            !t.is_empty()
                && t.len() <= 128
                && t.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        });

        (name_ok && tag_ok).then_some(ImageRef { name, tag })
    }
}

/// One user-owned simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub spec: SessionSpec,
    pub state: SessionState,
    /// The desktop (renderer) container.
    pub container: Option<ContainerRef>,
    /// Vehicle SITL containers of a multi-host session, in vehicle order.
    #[serde(default)]
    pub workers: Vec<ContainerRef>,
    pub binding: Option<PortBinding>,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    /// Last engine error that drove the session to Failed.
    #[serde(default)]
    pub last_error: Option<String>,
}

impl Session {
    /// Checks the structural invariants tying state to container and binding.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.state.has_container() && (self.container.is_none() || self.binding.is_none()) {
            return Err(format!("session {} is {} without container or binding", self.id, self.state));
        }
        if self.state == SessionState::Requested && self.container.is_some() {
            return Err(format!("session {} is Requested but has a container", self.id));
        }
        if let Some(binding) = &self.binding {
            if binding.session != self.id {
                return Err(format!("session {} carries binding of {}", self.id, binding.session));
            }
        }
        Ok(())
    }

    /// All containers, renderer first.
    pub fn containers(&self) -> impl Iterator<Item = &ContainerRef> {
        self.container.iter().chain(self.workers.iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use LifecycleEvent as E;
    use SessionState as S;

    fn spec(image: &str, cpu: f64, mem_gib: u64) -> SessionSpec {
        SessionSpec {
            owner: "alice".into(),
            tenant: "asu".into(),
            image: image.into(),
            limits: ResourceLimits::new(cpu, mem_gib * ResourceLimits::GIB, false),
            stream_ssh: false,
            aux_bridge: false,
            vehicles: 0,
        }
    }

    #[test]
    fn suspend_and_resume() {
        assert_eq!(transition(S::Running, E::Suspend), Ok(S::Suspended));
        assert_eq!(transition(S::Suspended, E::Resume), Ok(S::Running));
    }

    #[test]
    fn self_loop_suspend_is_illegal() {
        assert_eq!(
            transition(S::Suspended, E::Suspend),
            Err(IllegalTransition { state: S::Suspended, event: E::Suspend })
        );
    }

    #[test]
    fn stopped_destroy() {
        assert_eq!(transition(S::Stopped, E::Destroy), Ok(S::Destroyed));
    }

    #[test]
    fn destroyed_is_absorbing() {
        for event in E::ALL {
            assert!(transition(S::Destroyed, event).is_err());
        }
    }

    /// Enumerates all 42 (state, event) pairs against the transition list
    /// written out edge by edge.
    #[test]
    fn exhaustive_transition_table() {
        let edges = [
            (S::Requested, E::Provisioned, S::Running),
            (S::Requested, E::Fail, S::Failed),
            (S::Running, E::Suspend, S::Suspended),
            (S::Suspended, E::Resume, S::Running),
            (S::Running, E::Stop, S::Stopped),
            (S::Stopped, E::Start, S::Running),
            (S::Running, E::Destroy, S::Destroyed),
            (S::Suspended, E::Destroy, S::Destroyed),
            (S::Stopped, E::Destroy, S::Destroyed),
            (S::Failed, E::Destroy, S::Destroyed),
            (S::Running, E::Fail, S::Failed),
            (S::Suspended, E::Fail, S::Failed),
        ];
        let mut legal = 0;
        for state in S::ALL {
            for event in E::ALL {
                let expected = edges.iter().find(|(s, e, _)| *s == state && *e == event).map(|(_, _, t)| *t);
                assert_eq!(transition(state, event).ok(), expected, "({state}, {event})");
                legal += expected.is_some() as usize;
            }
        }
        assert_eq!(legal, edges.len());
    }

    #[test]
    fn every_sequence_stays_in_graph() {
        // Breadth-first closure from Requested; every reachable state must be
        // one of the declared states and Destroyed must have no successor.
        let mut seen = vec![S::Requested];
        let mut frontier = vec![S::Requested];
        while let Some(state) = frontier.pop() {
            for event in E::ALL {
                if let Ok(next) = transition(state, event) {
                    if !seen.contains(&next) {
                        seen.push(next);
                        frontier.push(next);
                    }
                }
            }
        }
        seen.sort();
        assert_eq!(seen, S::ALL.to_vec());
    }

    #[test]
    fn validate_ok_within_quota() {
        let quota = ResourceLimits::new(4.0, 8 * ResourceLimits::GIB, false);
        assert_eq!(validate_spec(&spec("stub-desktop:1", 2.0, 4), &quota), Ok(()));
    }

    #[test]
    fn validate_reports_cpu_only() {
        let quota = ResourceLimits::new(4.0, 8 * ResourceLimits::GIB, false);
        assert_eq!(validate_spec(&spec("stub-desktop:1", 8.0, 4), &quota), Err(vec![SpecViolation::CpuCores]));
    }

    #[test]
    fn validate_empty_image() {
        let quota = ResourceLimits::new(4.0, 8 * ResourceLimits::GIB, false);
        assert_eq!(validate_spec(&spec("", 1.0, 1), &quota), Err(vec![SpecViolation::Image]));
    }

    #[test]
    fn validate_lists_every_violation() {
        let quota = ResourceLimits::new(1.0, ResourceLimits::GIB, false);
        let mut s = spec("bad image", 2.0, 2);
        s.limits.gpu_required = true;
        assert_eq!(
            validate_spec(&s, &quota),
            Err(vec![
                SpecViolation::CpuCores,
                SpecViolation::MemoryBytes,
                SpecViolation::GpuRequired,
                SpecViolation::Image
            ])
        );
    }

    #[test]
    fn image_refs() {
        assert_eq!(ImageRef::parse("stub-desktop:1"), Some(ImageRef { name: "stub-desktop", tag: Some("1") }));
        assert_eq!(ImageRef::parse("registry:5000/a/b"), Some(ImageRef { name: "registry:5000/a/b", tag: None }));
        assert_eq!(
            ImageRef::parse("backup/sess-7:2024-01-15"),
            Some(ImageRef { name: "backup/sess-7", tag: Some("2024-01-15") })
        );
        for bad in ["", ":", "img:", "/img", "img/", "a//b", "with space"] {
            assert_eq!(ImageRef::parse(bad), None, "{bad:?}");
        }
    }

    #[test]
    fn session_id_rejects_zero() {
        assert!(SessionId::new(0).is_none());
        assert!(serde_json::from_str::<SessionId>("0").is_err());
        assert_eq!(serde_json::from_str::<SessionId>("7").unwrap().get(), 7);
    }
}
