//! Embedded reverse proxy for simdesk sessions.
//!
//! HTTP requests are routed by `Host` to the session's web port, WebSocket
//! upgrades become transparent byte relays once the backend answers 101, and
//! each stream route gets its own raw TCP listener. Route tables are swapped
//! atomically; a connection keeps the table it was accepted under.

mod export;
mod gateway;
mod http;
mod stats;
mod tls;

pub use export::{export_proxy_config, export_with, ExportOptions};
pub use gateway::{Gateway, GatewayConfig, GatewayStartError};
pub use http::strip_hop_by_hop;
pub use stats::{RelayMode, RelayStats};
pub use tls::{TlsError, TlsMaterial};

use simdesk_core::routes::{Backend, RouteTable};

/// Lowercases `host_header` and drops any `:port` suffix. Bracketed IPv6
/// literals keep their brackets.
pub fn normalize_host(host_header: &str) -> String {
    let h = host_header.trim();
    let without_port = if let Some(rest) = h.strip_prefix('[') {
        match rest.find(']') {
            Some(end) => &h[..end + 2],
            None => h,
        }
    } else {
        match h.rsplit_once(':') {
            Some((name, port)) if port.bytes().all(|b| b.is_ascii_digit()) => name,
            _ => h,
        }
    };
    without_port.to_ascii_lowercase()
}

/// Exact, case-insensitive hostname lookup; the port in the header is ignored.
pub fn resolve_route<'t>(host_header: &str, table: &'t RouteTable) -> Option<&'t Backend> {
    table.http_routes.get(&normalize_host(host_header))
}
