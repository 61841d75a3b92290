//! Core of the simdesk control plane: session types, the container engine
//! client, port allocation, multi-host placement and the lifecycle writer.

pub mod allocator;
pub mod engine;
pub mod lifecycle;
pub mod placement;
pub mod routes;
pub mod session;

pub use allocator::{AllocError, Allocator, AllocatorConfig, PortBinding, Wants};
pub use engine::{ContainerRef, Engine, EngineError, EngineStatus, FakeEngine, HostId};
pub use lifecycle::{Command, CommandKind, Lifecycle, LifecycleConfig, LifecycleError, LifecycleHandle};
pub use routes::{Backend, RoutePublisher, RouteTable};
pub use session::{
    PrincipalId, ResourceLimits, Session, SessionId, SessionSpec, SessionState, TenantId, Timestamp,
};
