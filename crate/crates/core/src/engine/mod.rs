//! Container engine client.
//!
//! [`Engine`] is the narrow slice of a Docker-compatible engine the control
//! plane needs. [`FakeEngine`] implements it in memory with a recorded call
//! log; [`DockerEngine`] speaks the Docker Engine HTTP API.

mod docker;
mod fake;

use std::fmt;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

pub use docker::{DockerEngine, EngineEndpoint};
pub use fake::{EngineCall, FakeEngine, FakeEngineState};

use crate::session::ImageRef;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub String);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for HostId {
    fn from(s: &str) -> Self {
        HostId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContainerRef {
    pub id: String,
    pub host: HostId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortMapping {
    pub container_port: u16,
    pub host_port: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerConfig {
    pub image: String,
    pub memory_limit: u64,
    pub cpu_quota: f64,
    pub port_mappings: Vec<PortMapping>,
    pub network: String,
    #[serde(default)]
    privileged: bool,
}

impl ContainerConfig {
    pub fn new(image: impl Into<String>, memory_limit: u64, cpu_quota: f64, network: impl Into<String>) -> Self {
        ContainerConfig {
            image: image.into(),
            memory_limit,
            cpu_quota,
            port_mappings: Vec::new(),
            network: network.into(),
            privileged: false,
        }
    }

    pub fn with_port(mut self, container_port: u16, host_port: u16) -> Self {
        self.port_mappings.push(PortMapping { container_port, host_port });
        self
    }

    pub fn privileged(&self) -> bool {
        self.privileged
    }

    /// Rejects configs no engine call may ever carry.
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.privileged {
            return Err(EngineError::InvalidConfig("privileged containers are not allowed".into()));
        }
        if ImageRef::parse(&self.image).is_none() {
            return Err(EngineError::InvalidConfig(format!("bad image reference {:?}", self.image)));
        }
        if !(self.cpu_quota.is_finite() && self.cpu_quota > 0.0) || self.memory_limit == 0 {
            return Err(EngineError::InvalidConfig("resource limits must be positive".into()));
        }
        for (i, a) in self.port_mappings.iter().enumerate() {
            if self.port_mappings[..i].iter().any(|b| b.host_port == a.host_port) {
                return Err(EngineError::InvalidConfig(format!("host port {} mapped twice", a.host_port)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EngineStatus {
    Created,
    Running,
    Paused,
    Exited,
    /// Returned by a successful `remove`; never reported by `inspect`.
    Removed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContainerAction {
    Start,
    Pause,
    Unpause,
    Stop,
    Remove,
}

impl ContainerAction {
    pub fn as_str(self) -> &'static str {
        match self {
            ContainerAction::Start => "start",
            ContainerAction::Pause => "pause",
            ContainerAction::Unpause => "unpause",
            ContainerAction::Stop => "stop",
            ContainerAction::Remove => "remove",
        }
    }
}

impl fmt::Display for ContainerAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The engine status machine this control plane relies on.
pub fn next_status(status: EngineStatus, action: ContainerAction) -> Option<EngineStatus> {
    use ContainerAction as A;
    use EngineStatus as S;
    match (status, action) {
        (S::Created, A::Start) => Some(S::Running),
        (S::Exited, A::Start) => Some(S::Running),
        (S::Running, A::Pause) => Some(S::Paused),
        (S::Paused, A::Unpause) => Some(S::Running),
        (S::Running, A::Stop) => Some(S::Exited),
        (S::Created | S::Exited, A::Remove) => Some(S::Removed),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerInfo {
    pub config: ContainerConfig,
    pub status: EngineStatus,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("image not found: {0}")]
    ImageNotFound(String),
    #[error("host port {0} already in use")]
    PortConflict(u16),
    #[error("engine unavailable: {0}")]
    EngineUnavailable(String),
    #[error("cannot {action} a container in status {status:?}")]
    InvalidAction { status: EngineStatus, action: ContainerAction },
    #[error("no such container or image: {0}")]
    NotFound(String),
    #[error("invalid tag: {0:?}")]
    TagInvalid(String),
    #[error("unknown host: {0}")]
    UnknownHost(HostId),
    #[error("invalid container config: {0}")]
    InvalidConfig(String),
    #[error("engine returned an unexpected response: {0}")]
    Protocol(String),
}

#[async_trait]
pub trait Engine: Send + Sync {
    async fn create_container(&self, cfg: &ContainerConfig, host: &HostId) -> Result<ContainerRef, EngineError>;

    async fn lifecycle_action(&self, r: &ContainerRef, action: ContainerAction) -> Result<EngineStatus, EngineError>;

    /// Snapshots the container's filesystem into image `tag`. The container
    /// itself is untouched.
    async fn commit_image(&self, r: &ContainerRef, tag: &str) -> Result<String, EngineError>;

    async fn inspect(&self, r: &ContainerRef) -> Result<ContainerInfo, EngineError>;

    /// Image references on `host` whose repository equals `repository`.
    async fn list_images(&self, host: &HostId, repository: &str) -> Result<Vec<String>, EngineError>;

    async fn remove_image(&self, host: &HostId, reference: &str) -> Result<(), EngineError>;
}

/// Bounded exponential backoff for transport failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base: Duration::from_millis(100), factor: 2 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `n` (0-based).
    pub fn delay(&self, n: u32) -> Duration {
        self.base * self.factor.saturating_pow(n)
    }

    /// Runs `op` until it succeeds, returns a non-retryable error, or the
    /// attempts are used up. `retryable` selects transport failures.
    pub async fn run<T, E, F, Fut>(&self, mut op: F, retryable: impl Fn(&E) -> bool) -> Result<T, E>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, E>>,
    {
        let mut attempt = 0;
        loop {
            match op().await {
                Err(e) if retryable(&e) && attempt + 1 < self.attempts => {
                    tokio::time::sleep(self.delay(attempt)).await;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}
