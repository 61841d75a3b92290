//! Route tables handed from the lifecycle to the gateway.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Backend {
    pub host: String,
    pub port: u16,
}

impl Backend {
    pub fn new(host: impl Into<String>, port: u16) -> Backend {
        Backend { host: host.into(), port }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

/// Hostname routes for HTTP/WebSocket and listen-port routes for raw TCP.
/// Hostnames are stored lowercased.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteTable {
    pub http_routes: BTreeMap<String, Backend>,
    pub stream_routes: BTreeMap<u16, Backend>,
    pub generation: u64,
}

impl RouteTable {
    pub fn new(generation: u64) -> RouteTable {
        RouteTable { generation, ..Default::default() }
    }

    pub fn with_http(mut self, hostname: &str, backend: Backend) -> Self {
        self.http_routes.insert(hostname.to_ascii_lowercase(), backend);
        self
    }

    pub fn with_stream(mut self, listen_port: u16, backend: Backend) -> Self {
        self.stream_routes.insert(listen_port, backend);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PublishError {
    #[error("stale generation {offered}; current is {current}")]
    StaleGeneration { offered: u64, current: u64 },
    #[error("stream listen port {0} collides with the gateway's HTTP port")]
    PortCollision(u16),
    #[error("cannot listen on stream port {port}: {reason}")]
    Bind { port: u16, reason: String },
}

/// Anything that serves a [`RouteTable`].
pub trait RoutePublisher: Send + Sync {
    fn publish(&self, table: RouteTable) -> Result<(), PublishError>;

    fn current_generation(&self) -> u64;
}

/// Keeps every published table. Used where no gateway is running.
#[derive(Debug, Default)]
pub struct RecordingPublisher {
    tables: Mutex<Vec<RouteTable>>,
}

impl RecordingPublisher {
    pub fn latest(&self) -> Option<RouteTable> {
        self.tables.lock().expect("publisher mutex poisoned").last().cloned()
    }

    pub fn history(&self) -> Vec<RouteTable> {
        self.tables.lock().expect("publisher mutex poisoned").clone()
    }
}

impl RoutePublisher for RecordingPublisher {
    fn publish(&self, table: RouteTable) -> Result<(), PublishError> {
        let mut tables = self.tables.lock().expect("publisher mutex poisoned");
        let current = tables.last().map_or(0, |t| t.generation);
        if table.generation <= current {
            return Err(PublishError::StaleGeneration { offered: table.generation, current });
        }
        tables.push(table);
        Ok(())
    }

    fn current_generation(&self) -> u64 {
        self.tables.lock().expect("publisher mutex poisoned").last().map_or(0, |t| t.generation)
    }
}
