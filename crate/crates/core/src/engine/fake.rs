use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Mutex;

use async_trait::async_trait;

use super::{
    next_status, ContainerAction, ContainerConfig, ContainerInfo, ContainerRef, Engine, EngineError, EngineStatus,
    HostId,
};
use crate::session::ImageRef;

/// One engine operation as seen by the fake, in call order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineCall {
    Create { host: HostId, image: String, host_ports: Vec<u16> },
    Action { id: String, action: ContainerAction },
    Commit { id: String, tag: String },
    Inspect { id: String },
    ListImages { host: HostId, repository: String },
    RemoveImage { host: HostId, reference: String },
}

#[derive(Debug, Clone)]
struct FakeContainer {
    config: ContainerConfig,
    status: EngineStatus,
}

#[derive(Debug, Clone, Default)]
struct FakeHost {
    images: BTreeSet<String>,
    containers: BTreeMap<String, FakeContainer>,
}

/// Cloneable snapshot of everything the fake knows, used to restore an
/// engine view after a simulated control-plane crash.
#[derive(Debug, Clone, Default)]
pub struct FakeEngineState {
    hosts: BTreeMap<HostId, FakeHost>,
    next_id: u64,
    record: Vec<EngineCall>,
    unavailable: bool,
    faults: VecDeque<(FaultKey, EngineError)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FaultKey {
    Create,
    Action(ContainerAction),
    Commit,
}

/// Deterministic in-memory engine. Container ids are sequence numbers, so the
/// same call sequence always yields the same ids, statuses and call record.
#[derive(Debug, Default)]
pub struct FakeEngine {
    state: Mutex<FakeEngineState>,
}

fn normalize(reference: &str) -> String {
    match ImageRef::parse(reference) {
        Some(ImageRef { tag: None, .. }) => format!("{reference}:latest"),
        _ => reference.to_owned(),
    }
}

impl FakeEngine {
    /// An engine with `hosts`, each preloaded with `images`.
    pub fn new<'a>(hosts: impl IntoIterator<Item = &'a str>, images: &[&str]) -> FakeEngine {
        let images: BTreeSet<String> = images.iter().map(|i| normalize(i)).collect();
        let hosts = hosts
            .into_iter()
            .map(|h| (HostId::from(h), FakeHost { images: images.clone(), containers: BTreeMap::new() }))
            .collect();
        FakeEngine { state: Mutex::new(FakeEngineState { hosts, ..Default::default() }) }
    }

    /// Single host `host0` with the given images.
    pub fn single_host(images: &[&str]) -> FakeEngine {
        FakeEngine::new(["host0"], images)
    }

    pub fn from_state(state: FakeEngineState) -> FakeEngine {
        FakeEngine { state: Mutex::new(state) }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, FakeEngineState> {
        self.state.lock().expect("fake engine mutex poisoned")
    }

    pub fn snapshot(&self) -> FakeEngineState {
        self.lock().clone()
    }

    pub fn calls(&self) -> Vec<EngineCall> {
        self.lock().record.clone()
    }

    pub fn clear_calls(&self) {
        self.lock().record.clear();
    }

    pub fn images(&self, host: &HostId) -> Vec<String> {
        self.lock().hosts.get(host).map(|h| h.images.iter().cloned().collect()).unwrap_or_default()
    }

    pub fn add_image(&self, host: &HostId, reference: &str) {
        if let Some(h) = self.lock().hosts.get_mut(host) {
            h.images.insert(normalize(reference));
        }
    }

    /// Containers that exist, with their status, across all hosts.
    pub fn containers(&self) -> Vec<(ContainerRef, EngineStatus)> {
        let state = self.lock();
        state
            .hosts
            .iter()
            .flat_map(|(host, h)| {
                h.containers.iter().map(|(id, c)| (ContainerRef { id: id.clone(), host: host.clone() }, c.status))
            })
            .collect()
    }

    /// Every call fails with `EngineUnavailable` while set.
    pub fn set_unavailable(&self, unavailable: bool) {
        self.lock().unavailable = unavailable;
    }

    /// The next matching create fails with `error`.
    pub fn fail_next_create(&self, error: EngineError) {
        self.lock().faults.push_back((FaultKey::Create, error));
    }

    pub fn fail_next_action(&self, action: ContainerAction, error: EngineError) {
        self.lock().faults.push_back((FaultKey::Action(action), error));
    }

    pub fn fail_next_commit(&self, error: EngineError) {
        self.lock().faults.push_back((FaultKey::Commit, error));
    }

    /// Removes a container behind the control plane's back.
    pub fn vanish(&self, r: &ContainerRef) {
        if let Some(h) = self.lock().hosts.get_mut(&r.host) {
            h.containers.remove(&r.id);
        }
    }
}

impl FakeEngineState {
    fn take_fault(&mut self, key: FaultKey) -> Option<EngineError> {
        let pos = self.faults.iter().position(|(k, _)| *k == key)?;
        self.faults.remove(pos).map(|(_, e)| e)
    }

    fn check_available(&self) -> Result<(), EngineError> {
        if self.unavailable {
            Err(EngineError::EngineUnavailable("fake engine marked unavailable".into()))
        } else {
            Ok(())
        }
    }

    fn host_mut(&mut self, host: &HostId) -> Result<&mut FakeHost, EngineError> {
        self.hosts.get_mut(host).ok_or_else(|| EngineError::UnknownHost(host.clone()))
    }

    fn container_mut(&mut self, r: &ContainerRef) -> Result<&mut FakeContainer, EngineError> {
        self.hosts.get_mut(&r.host).and_then(|h| h.containers.get_mut(&r.id)).ok_or_else(|| EngineError::NotFound(r.id.clone()))
    }
}

#[async_trait]
impl Engine for FakeEngine {
    async fn create_container(&self, cfg: &ContainerConfig, host: &HostId) -> Result<ContainerRef, EngineError> {
        let mut state = self.lock();
        state.record.push(EngineCall::Create {
            host: host.clone(),
            image: cfg.image.clone(),
            host_ports: cfg.port_mappings.iter().map(|p| p.host_port).collect(),
        });
        state.check_available()?;
        if let Some(e) = state.take_fault(FaultKey::Create) {
            return Err(e);
        }
        cfg.validate()?;

        let h = state.host_mut(host)?;
        if !h.images.contains(&normalize(&cfg.image)) {
            return Err(EngineError::ImageNotFound(cfg.image.clone()));
        }
        for mapping in &cfg.port_mappings {
            let taken = h.containers.values().any(|c| c.config.port_mappings.iter().any(|m| m.host_port == mapping.host_port));
            if taken {
                return Err(EngineError::PortConflict(mapping.host_port));
            }
        }

        state.next_id += 1;
        let id = format!("{:012x}", state.next_id);
        let h = state.host_mut(host)?;
        h.containers.insert(id.clone(), FakeContainer { config: cfg.clone(), status: EngineStatus::Created });
        Ok(ContainerRef { id, host: host.clone() })
    }

    async fn lifecycle_action(&self, r: &ContainerRef, action: ContainerAction) -> Result<EngineStatus, EngineError> {
        let mut state = self.lock();
        state.record.push(EngineCall::Action { id: r.id.clone(), action });
        state.check_available()?;
        if let Some(e) = state.take_fault(FaultKey::Action(action)) {
            return Err(e);
        }

        let container = state.container_mut(r)?;
        let next = next_status(container.status, action)
            .ok_or(EngineError::InvalidAction { status: container.status, action })?;
        if next == EngineStatus::Removed {
            state.host_mut(&r.host)?.containers.remove(&r.id);
        } else {
            container.status = next;
        }
        Ok(next)
    }

    async fn commit_image(&self, r: &ContainerRef, tag: &str) -> Result<String, EngineError> {
        let mut state = self.lock();
        state.record.push(EngineCall::Commit { id: r.id.clone(), tag: tag.to_owned() });
        state.check_available()?;
        if let Some(e) = state.take_fault(FaultKey::Commit) {
            return Err(e);
        }

        let status = state.container_mut(r)?.status;
        if !matches!(status, EngineStatus::Running | EngineStatus::Paused | EngineStatus::Exited) {
            return Err(EngineError::InvalidAction { status, action: ContainerAction::Stop });
        }
        if ImageRef::parse(tag).is_none() {
            return Err(EngineError::TagInvalid(tag.to_owned()));
        }
        let reference = normalize(tag);
        state.host_mut(&r.host)?.images.insert(reference.clone());
        Ok(reference)
    }

    async fn inspect(&self, r: &ContainerRef) -> Result<ContainerInfo, EngineError> {
        let mut state = self.lock();
        state.record.push(EngineCall::Inspect { id: r.id.clone() });
        state.check_available()?;
        let c = state.container_mut(r)?;
        Ok(ContainerInfo { config: c.config.clone(), status: c.status })
    }

    async fn list_images(&self, host: &HostId, repository: &str) -> Result<Vec<String>, EngineError> {
        let mut state = self.lock();
        state.record.push(EngineCall::ListImages { host: host.clone(), repository: repository.to_owned() });
        state.check_available()?;
        let h = state.host_mut(host)?;
        Ok(h
            .images
            .iter()
            .filter(|i| ImageRef::parse(i).is_some_and(|r| r.name == repository))
            .cloned()
            .collect())
    }

    async fn remove_image(&self, host: &HostId, reference: &str) -> Result<(), EngineError> {
        let mut state = self.lock();
        state.record.push(EngineCall::RemoveImage { host: host.clone(), reference: reference.to_owned() });
        state.check_available()?;
        let h = state.host_mut(host)?;
        if h.images.remove(&normalize(reference)) {
            Ok(())
        } else {
            Err(EngineError::NotFound(reference.to_owned()))
        }
    }
}
