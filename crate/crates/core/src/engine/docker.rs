//! Docker Engine API backend.
//!
//! Speaks HTTP/1.1 over a unix socket or TCP, one connection per request.
//! Transport failures are retried per [`RetryPolicy`]; operations on the same
//! container id are serialized so that concurrent pause/unpause never
//! interleave at the engine.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::{Method, Request, StatusCode};
use hyper_util::rt::TokioIo;
use serde_json::{json, Value};

use super::{
    ContainerAction, ContainerConfig, ContainerInfo, ContainerRef, Engine, EngineError, EngineStatus, HostId,
    PortMapping, RetryPolicy,
};
use crate::session::ImageRef;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEndpoint {
    Unix(PathBuf),
    Tcp(String),
}

impl FromStr for EngineEndpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("unix://") {
            return Ok(EngineEndpoint::Unix(PathBuf::from(path)));
        }
        let addr = s.strip_prefix("tcp://").or_else(|| s.strip_prefix("http://"));
        match addr {
            Some(a) if !a.is_empty() => Ok(EngineEndpoint::Tcp(a.trim_end_matches('/').to_owned())),
            _ => Err(format!("unsupported engine endpoint {s:?}; use unix://PATH or tcp://HOST:PORT")),
        }
    }
}

impl fmt::Display for EngineEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineEndpoint::Unix(p) => write!(f, "unix://{}", p.display()),
            EngineEndpoint::Tcp(a) => write!(f, "tcp://{a}"),
        }
    }
}

#[derive(Debug)]
enum CallError {
    Transport(String),
    Engine(EngineError),
}

struct Reply {
    status: StatusCode,
    body: Bytes,
}

impl Reply {
    fn json(&self) -> Result<Value, EngineError> {
        serde_json::from_slice(&self.body).map_err(|e| EngineError::Protocol(format!("bad json: {e}")))
    }

    fn message(&self) -> String {
        self.json()
            .ok()
            .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_owned))
            .unwrap_or_else(|| String::from_utf8_lossy(&self.body).into_owned())
    }
}

pub struct DockerEngine {
    hosts: BTreeMap<HostId, EngineEndpoint>,
    api_version: String,
    retry: RetryPolicy,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl DockerEngine {
    pub fn new(hosts: BTreeMap<HostId, EngineEndpoint>, api_version: impl Into<String>) -> DockerEngine {
        DockerEngine { hosts, api_version: api_version.into(), retry: RetryPolicy::default(), locks: Mutex::default() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn container_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks.lock().expect("lock table poisoned").entry(id.to_owned()).or_default().clone()
    }

    fn endpoint(&self, host: &HostId) -> Result<&EngineEndpoint, EngineError> {
        self.hosts.get(host).ok_or_else(|| EngineError::UnknownHost(host.clone()))
    }

    async fn call(&self, host: &HostId, method: Method, path: &str, body: Option<Value>) -> Result<Reply, EngineError> {
        let endpoint = self.endpoint(host)?;
        let uri = format!("/{}{}", self.api_version, path);
        let body = body.map(|v| Bytes::from(v.to_string()));
        let result = self
            .retry
            .run(|| send_once(endpoint, method.clone(), &uri, body.clone()), |e| matches!(e, CallError::Transport(_)))
            .await;
        match result {
            Ok(reply) => Ok(reply),
            Err(CallError::Transport(msg)) => Err(EngineError::EngineUnavailable(format!("{endpoint}: {msg}"))),
            Err(CallError::Engine(e)) => Err(e),
        }
    }
}

async fn send_once(endpoint: &EngineEndpoint, method: Method, uri: &str, body: Option<Bytes>) -> Result<Reply, CallError> {
    let transport = |e: &dyn fmt::Display| CallError::Transport(e.to_string());

    let mut builder = Request::builder().method(method).uri(uri);
    builder = match endpoint {
        EngineEndpoint::Unix(_) => builder.header(hyper::header::HOST, "docker"),
        EngineEndpoint::Tcp(addr) => builder.header(hyper::header::HOST, addr.as_str()),
    };
    if body.is_some() {
        builder = builder.header(hyper::header::CONTENT_TYPE, "application/json");
    }
    let request = builder
        .body(Full::new(body.unwrap_or_default()))
        .map_err(|e| CallError::Engine(EngineError::Protocol(e.to_string())))?;

    let response = match endpoint {
        EngineEndpoint::Unix(path) => {
            #[cfg(unix)]
            {
                let stream = tokio::net::UnixStream::connect(path).await.map_err(|e| transport(&e))?;
                roundtrip(TokioIo::new(stream), request).await?
            }
            #[cfg(not(unix))]
            {
                let _ = path;
                return Err(CallError::Transport("unix sockets are not supported on this platform".into()));
            }
        }
        EngineEndpoint::Tcp(addr) => {
            let stream = tokio::net::TcpStream::connect(addr).await.map_err(|e| transport(&e))?;
            roundtrip(TokioIo::new(stream), request).await?
        }
    };
    Ok(response)
}

async fn roundtrip<IO>(io: IO, request: Request<Full<Bytes>>) -> Result<Reply, CallError>
where
    IO: hyper::rt::Read + hyper::rt::Write + Unpin + Send + 'static,
{
    let transport = |e: hyper::Error| CallError::Transport(e.to_string());
    let (mut sender, conn) = hyper::client::conn::http1::handshake(io).await.map_err(transport)?;
    tokio::spawn(async move {
        if let Err(e) = conn.await {
            tracing::debug!("engine connection closed: {e}");
        }
    });
    let response = sender.send_request(request).await.map_err(transport)?;
    let status = response.status();
    let body = response.into_body().collect().await.map_err(transport)?.to_bytes();
    Ok(Reply { status, body })
}

fn encode_query(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for b in value.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn port_key(port: u16) -> String {
    format!("{port}/tcp")
}

fn create_body(cfg: &ContainerConfig) -> Value {
    let exposed: serde_json::Map<String, Value> =
        cfg.port_mappings.iter().map(|m| (port_key(m.container_port), json!({}))).collect();
    let bindings: serde_json::Map<String, Value> = cfg
        .port_mappings
        .iter()
        .map(|m| (port_key(m.container_port), json!([{ "HostIp": "", "HostPort": m.host_port.to_string() }])))
        .collect();
    json!({
        "Image": cfg.image,
        "ExposedPorts": exposed,
        "HostConfig": {
            "Memory": cfg.memory_limit,
            "NanoCpus": (cfg.cpu_quota * 1e9).round() as i64,
            "Privileged": false,
            "NetworkMode": cfg.network,
            "PortBindings": bindings,
        },
    })
}

fn parse_status(s: &str) -> Result<EngineStatus, EngineError> {
    match s {
        "created" => Ok(EngineStatus::Created),
        "running" | "restarting" => Ok(EngineStatus::Running),
        "paused" => Ok(EngineStatus::Paused),
        "exited" | "dead" => Ok(EngineStatus::Exited),
        other => Err(EngineError::Protocol(format!("unknown container status {other:?}"))),
    }
}

fn parse_inspect(v: &Value) -> Result<ContainerInfo, EngineError> {
    let missing = |field: &str| EngineError::Protocol(format!("inspect response lacks {field}"));
    let host_config = v.get("HostConfig").ok_or_else(|| missing("HostConfig"))?;
    let image = v.pointer("/Config/Image").and_then(Value::as_str).ok_or_else(|| missing("Config.Image"))?;
    let status = v.pointer("/State/Status").and_then(Value::as_str).ok_or_else(|| missing("State.Status"))?;

    let mut port_mappings = Vec::new();
    if let Some(bindings) = host_config.get("PortBindings").and_then(Value::as_object) {
        for (key, hosts) in bindings {
            let container_port = key
                .split('/')
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| EngineError::Protocol(format!("bad port key {key:?}")))?;
            for host in hosts.as_array().into_iter().flatten() {
                if let Some(host_port) = host.get("HostPort").and_then(Value::as_str).and_then(|p| p.parse().ok()) {
                    port_mappings.push(PortMapping { container_port, host_port });
                }
            }
        }
    }
    port_mappings.sort_by_key(|m| (m.container_port, m.host_port));

    let mut config = ContainerConfig::new(
        image,
        host_config.get("Memory").and_then(Value::as_u64).unwrap_or(0),
        host_config.get("NanoCpus").and_then(Value::as_i64).unwrap_or(0) as f64 / 1e9,
        host_config.get("NetworkMode").and_then(Value::as_str).unwrap_or_default(),
    );
    config.port_mappings = port_mappings;
    if host_config.get("Privileged").and_then(Value::as_bool).unwrap_or(false) {
        return Err(EngineError::Protocol("container reports privileged mode".into()));
    }
    Ok(ContainerInfo { config, status: parse_status(status)? })
}

/// Extracts the port from messages like
/// `Bind for 0.0.0.0:4005 failed: port is already allocated`.
fn port_conflict(message: &str) -> Option<u16> {
    if !message.contains("port is already allocated") {
        return None;
    }
    let bind = message.rsplit("Bind for ").next()?;
    let addr = bind.split(" failed").next()?;
    addr.rsplit(':').next()?.trim().parse().ok()
}

#[async_trait]
impl Engine for DockerEngine {
    async fn create_container(&self, cfg: &ContainerConfig, host: &HostId) -> Result<ContainerRef, EngineError> {
        cfg.validate()?;
        let reply = self.call(host, Method::POST, "/containers/create", Some(create_body(cfg))).await?;
        match reply.status {
            StatusCode::CREATED | StatusCode::OK => {
                let id = reply.json()?.get("Id").and_then(Value::as_str).map(str::to_owned);
                let id = id.filter(|s| !s.is_empty()).ok_or_else(|| EngineError::Protocol("create returned no Id".into()))?;
                Ok(ContainerRef { id, host: host.clone() })
            }
            StatusCode::NOT_FOUND => Err(EngineError::ImageNotFound(cfg.image.clone())),
            _ => Err(match port_conflict(&reply.message()) {
                Some(port) => EngineError::PortConflict(port),
                None => EngineError::Protocol(format!("create: {} {}", reply.status, reply.message())),
            }),
        }
    }

    async fn lifecycle_action(&self, r: &ContainerRef, action: ContainerAction) -> Result<EngineStatus, EngineError> {
        let lock = self.container_lock(&r.id);
        let _guard = lock.lock().await;

        let (method, path, next) = match action {
            ContainerAction::Start => (Method::POST, format!("/containers/{}/start", r.id), EngineStatus::Running),
            ContainerAction::Pause => (Method::POST, format!("/containers/{}/pause", r.id), EngineStatus::Paused),
            ContainerAction::Unpause => (Method::POST, format!("/containers/{}/unpause", r.id), EngineStatus::Running),
            ContainerAction::Stop => (Method::POST, format!("/containers/{}/stop", r.id), EngineStatus::Exited),
            ContainerAction::Remove => (Method::DELETE, format!("/containers/{}", r.id), EngineStatus::Removed),
        };
        let reply = self.call(&r.host, method, &path, None).await?;
        match reply.status {
            StatusCode::NO_CONTENT | StatusCode::OK | StatusCode::NOT_MODIFIED => Ok(next),
            StatusCode::NOT_FOUND => Err(EngineError::NotFound(r.id.clone())),
            StatusCode::CONFLICT => {
                let status = match self.call(&r.host, Method::GET, &format!("/containers/{}/json", r.id), None).await {
                    Ok(reply) if reply.status == StatusCode::OK => parse_inspect(&reply.json()?)?.status,
                    _ => return Err(EngineError::Protocol(format!("{action}: {}", reply.message()))),
                };
                Err(EngineError::InvalidAction { status, action })
            }
            _ => Err(match port_conflict(&reply.message()) {
                Some(port) => EngineError::PortConflict(port),
                None => EngineError::Protocol(format!("{action}: {} {}", reply.status, reply.message())),
            }),
        }
    }

    async fn commit_image(&self, r: &ContainerRef, tag: &str) -> Result<String, EngineError> {
        let parsed = ImageRef::parse(tag).ok_or_else(|| EngineError::TagInvalid(tag.to_owned()))?;
        let lock = self.container_lock(&r.id);
        let _guard = lock.lock().await;

        let mut path = format!("/commit?container={}&repo={}", encode_query(&r.id), encode_query(parsed.name));
        if let Some(t) = parsed.tag {
            path.push_str(&format!("&tag={}", encode_query(t)));
        }
        let reply = self.call(&r.host, Method::POST, &path, None).await?;
        match reply.status {
            StatusCode::CREATED | StatusCode::OK => Ok(format!("{}:{}", parsed.name, parsed.tag.unwrap_or("latest"))),
            StatusCode::NOT_FOUND => Err(EngineError::NotFound(r.id.clone())),
            _ => Err(EngineError::Protocol(format!("commit: {} {}", reply.status, reply.message()))),
        }
    }

    async fn inspect(&self, r: &ContainerRef) -> Result<ContainerInfo, EngineError> {
        let reply = self.call(&r.host, Method::GET, &format!("/containers/{}/json", r.id), None).await?;
        match reply.status {
            StatusCode::OK => parse_inspect(&reply.json()?),
            StatusCode::NOT_FOUND => Err(EngineError::NotFound(r.id.clone())),
            _ => Err(EngineError::Protocol(format!("inspect: {} {}", reply.status, reply.message()))),
        }
    }

    async fn list_images(&self, host: &HostId, repository: &str) -> Result<Vec<String>, EngineError> {
        let filters = json!({ "reference": [repository] }).to_string();
        let path = format!("/images/json?filters={}", encode_query(&filters));
        let reply = self.call(host, Method::GET, &path, None).await?;
        if reply.status != StatusCode::OK {
            return Err(EngineError::Protocol(format!("list images: {} {}", reply.status, reply.message())));
        }
        let mut tags: Vec<String> = reply
            .json()?
            .as_array()
            .into_iter()
            .flatten()
            .flat_map(|img| img.get("RepoTags").and_then(Value::as_array).cloned().unwrap_or_default())
            .filter_map(|t| t.as_str().map(str::to_owned))
            .filter(|t| ImageRef::parse(t).is_some_and(|r| r.name == repository))
            .collect();
        tags.sort();
        tags.dedup();
        Ok(tags)
    }

    async fn remove_image(&self, host: &HostId, reference: &str) -> Result<(), EngineError> {
        let reply = self.call(host, Method::DELETE, &format!("/images/{reference}"), None).await?;
        match reply.status {
            StatusCode::OK => Ok(()),
            StatusCode::NOT_FOUND => Err(EngineError::NotFound(reference.to_owned())),
            _ => Err(EngineError::Protocol(format!("remove image: {} {}", reply.status, reply.message()))),
        }
    }
}
