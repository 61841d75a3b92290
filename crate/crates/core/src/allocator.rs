//! Session-id derived port and hostname allocation.
//!
//! A session with id `N` gets web host port `web_base + N` (the `40xx`
//! scheme), hostname `term-N.<domain>`, optionally an auxiliary bridge port
//! `aux_base + N`, and optionally the lowest free port in the SSH stream
//! range. The allocator only enforces uniqueness; choosing which id to use is
//! the caller's policy.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::session::SessionId;

/// Container-side port of the in-container web VNC client.
pub const WEB_CONTAINER_PORT: u16 = 40001;
/// Container-side port of the game-engine bridge.
pub const AUX_CONTAINER_PORT: u16 = 9090;
/// Container-side port of the SSH server.
pub const SSH_CONTAINER_PORT: u16 = 22;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocatorConfig {
    pub domain: String,
    pub web_base: u16,
    pub max_sessions: u32,
    pub stream_range: (u16, u16),
    pub aux_base: u16,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        AllocatorConfig {
            domain: "openuas.us".into(),
            web_base: 4000,
            max_sessions: 99,
            stream_range: (2200, 2299),
            aux_base: 9000,
        }
    }
}

impl AllocatorConfig {
    fn window(base: u16, max: u32) -> RangeInclusive<u32> {
        base as u32 + 1..=base as u32 + max
    }

    pub fn web_window(&self) -> RangeInclusive<u32> {
        Self::window(self.web_base, self.max_sessions)
    }

    pub fn aux_window(&self) -> RangeInclusive<u32> {
        Self::window(self.aux_base, self.max_sessions)
    }

    pub fn validate(&self) -> Result<(), AllocError> {
        let bad = |msg: String| Err(AllocError::InvalidConfig(msg));
        if self.max_sessions == 0 {
            return bad("max_sessions must be >= 1".into());
        }
        if self.domain.is_empty() {
            return bad("domain must be non-empty".into());
        }
        let (lo, hi) = self.stream_range;
        if lo == 0 || lo > hi {
            return bad(format!("stream_range {lo}-{hi} is empty"));
        }
        let web = self.web_window();
        let aux = self.aux_window();
        if *web.end() > u16::MAX as u32 || *aux.end() > u16::MAX as u32 {
            return bad("port window exceeds 65535".into());
        }
        let overlaps = |a: &RangeInclusive<u32>, b: &RangeInclusive<u32>| a.start() <= b.end() && b.start() <= a.end();
        let stream = lo as u32..=hi as u32;
        if overlaps(&web, &stream) {
            return bad("stream_range overlaps the web port window".into());
        }
        if overlaps(&web, &aux) {
            return bad("aux window overlaps the web port window".into());
        }
        if overlaps(&aux, &stream) {
            return bad("aux window overlaps stream_range".into());
        }
        Ok(())
    }

    pub fn hostname(&self, id: SessionId, domain: Option<&str>) -> String {
        format!("term-{}.{}", id.get(), domain.unwrap_or(&self.domain))
    }
}

/// Host-side ports and the public hostname of one session.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortBinding {
    pub session: SessionId,
    pub web_host_port: u16,
    pub web_container_port: u16,
    pub hostname: String,
    pub aux_bridge_port: Option<u16>,
    pub ssh_stream_port: Option<u16>,
}

impl PortBinding {
    pub fn host_ports(&self) -> impl Iterator<Item = u16> + '_ {
        std::iter::once(self.web_host_port).chain(self.aux_bridge_port).chain(self.ssh_stream_port)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wants {
    pub ssh: bool,
    pub aux: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AllocError {
    #[error("session id {0} is outside 1..={1}")]
    IdOutOfRange(u32, u32),
    #[error("session {0} is already bound")]
    AlreadyBound(SessionId),
    #[error("no free port left in the stream range")]
    StreamRangeExhausted,
    #[error("binding conflicts with a live binding: {0}")]
    Conflict(String),
    #[error("invalid allocator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone)]
pub struct Allocator {
    cfg: AllocatorConfig,
    bindings: BTreeMap<SessionId, PortBinding>,
    stream_in_use: BTreeSet<u16>,
}

impl Allocator {
    pub fn new(cfg: AllocatorConfig) -> Result<Allocator, AllocError> {
        cfg.validate()?;
        Ok(Allocator { cfg, bindings: BTreeMap::new(), stream_in_use: BTreeSet::new() })
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.cfg
    }

    /// Binds `id`. `domain` overrides the configured suffix for per-tenant
    /// virtual hosts.
    pub fn allocate(&mut self, id: SessionId, wants: Wants, domain: Option<&str>) -> Result<PortBinding, AllocError> {
        if id.get() > self.cfg.max_sessions {
            return Err(AllocError::IdOutOfRange(id.get(), self.cfg.max_sessions));
        }
        if self.bindings.contains_key(&id) {
            return Err(AllocError::AlreadyBound(id));
        }

        let ssh_stream_port = if wants.ssh {
            let (lo, hi) = self.cfg.stream_range;
            let port = (lo..=hi).find(|p| !self.stream_in_use.contains(p)).ok_or(AllocError::StreamRangeExhausted)?;
            Some(port)
        } else {
            None
        };

        // Both offsets are checked by `validate` to stay below 65536.
        let binding = PortBinding {
            session: id,
            web_host_port: self.cfg.web_base + id.get() as u16,
            web_container_port: WEB_CONTAINER_PORT,
            hostname: self.cfg.hostname(id, domain),
            aux_bridge_port: wants.aux.then(|| self.cfg.aux_base + id.get() as u16),
            ssh_stream_port,
        };
        self.insert(binding.clone());
        Ok(binding)
    }

    /// Re-installs a binding reconstructed from the journal.
    pub fn restore(&mut self, binding: PortBinding) -> Result<(), AllocError> {
        let id = binding.session;
        if id.get() > self.cfg.max_sessions {
            return Err(AllocError::IdOutOfRange(id.get(), self.cfg.max_sessions));
        }
        if self.bindings.contains_key(&id) {
            return Err(AllocError::AlreadyBound(id));
        }
        if let Some(port) = binding.ssh_stream_port {
            if self.stream_in_use.contains(&port) {
                return Err(AllocError::Conflict(format!("stream port {port}")));
            }
        }
        self.insert(binding);
        Ok(())
    }

    fn insert(&mut self, binding: PortBinding) {
        if let Some(port) = binding.ssh_stream_port {
            self.stream_in_use.insert(port);
        }
        self.bindings.insert(binding.session, binding);
    }

    /// Frees every port of `id`. Releasing an unbound id is a no-op.
    pub fn release(&mut self, id: SessionId) {
        if let Some(binding) = self.bindings.remove(&id) {
            if let Some(port) = binding.ssh_stream_port {
                self.stream_in_use.remove(&port);
            }
        }
    }

    /// Inverse of the hostname rule, for bound sessions only. Case-insensitive.
    pub fn lookup(&self, hostname: &str) -> Option<SessionId> {
        let host = hostname.to_ascii_lowercase();
        let rest = host.strip_prefix("term-")?;
        let (digits, _) = rest.split_once('.')?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
            return None;
        }
        let id = SessionId::new(digits.parse().ok()?)?;
        let binding = self.bindings.get(&id)?;
        (binding.hostname.eq_ignore_ascii_case(&host)).then_some(id)
    }

    pub fn get(&self, id: SessionId) -> Option<&PortBinding> {
        self.bindings.get(&id)
    }

    pub fn bindings(&self) -> impl Iterator<Item = &PortBinding> {
        self.bindings.values()
    }

    pub fn is_bound(&self, id: SessionId) -> bool {
        self.bindings.contains_key(&id)
    }
}
