//! The simdesk server: configuration, bearer-token auth, the HTTP control
//! API and the command-line front end.

pub mod api;
pub mod auth;
pub mod cli;
pub mod config;
pub mod identity;
pub mod reports;
pub mod serve;

pub use api::{router, ApiError, ApiState, SessionView};
pub use auth::{Principal, Role, TokenStore};
pub use config::{ServerConfig, TenantConfig};
