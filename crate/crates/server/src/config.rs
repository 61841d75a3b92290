//! Server configuration file.
//!
//! ```toml
//! [api]
//! listen = "127.0.0.1:8080"
//! journal = "/var/lib/simdesk/journal"
//!
//! [allocator]
//! domain = "openuas.us"
//!
//! [[hosts]]
//! id = "host0"
//! cpu_capacity = 16.0
//! mem_capacity = 68719476736
//! has_gpu = true
//! overlay = "simdesk-overlay"
//!
//! [snapshot]
//! schedule = "02:00:00"
//! retention = 7
//!
//! [gateway]
//! listen = "0.0.0.0:443"
//! tls_cert = "/etc/simdesk/cert.pem"
//! tls_key = "/etc/simdesk/key.pem"
//!
//! [engine]
//! kind = "docker"
//! endpoints = { host0 = "unix:///var/run/docker.sock" }
//!
//! [[tenants]]
//! id = "uas101"
//! domain = "openuas.us"
//! quota = { cpu_cores = 4.0, memory_bytes = 8589934592 }
//!
//! [[tokens]]
//! token = "..."
//! subject = "root"
//! tenant = "uas101"
//! role = "admin"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use simdesk_core::engine::EngineEndpoint;
use simdesk_core::{HostId, LifecycleConfig, ResourceLimits, TenantId};

use crate::auth::Role;

pub const CONFIG_ENV: &str = "SIMDESK_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    #[serde(default)]
    pub api: ApiConfig,
    /// Allocator, hosts, snapshot policy and session defaults. Tenant
    /// domains come from `tenants`.
    #[serde(flatten)]
    pub lifecycle: LifecycleConfig,
    #[serde(default)]
    pub gateway: Option<GatewaySection>,
    #[serde(default)]
    pub engine: EngineSection,
    pub tenants: Vec<TenantConfig>,
    #[serde(default)]
    pub tokens: Vec<StaticToken>,
    #[serde(default)]
    pub identity_hook: Option<IdentityHookConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    pub listen: SocketAddr,
    /// Journal file; without one, state lives only in memory.
    pub journal: Option<PathBuf>,
    /// Directory of `<run-id>.toml` latency reports.
    pub reports_dir: Option<PathBuf>,
    /// Seconds between snapshot-schedule checks.
    pub snapshot_check_secs: u64,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            journal: None,
            reports_dir: None,
            snapshot_check_secs: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySection {
    pub listen: SocketAddr,
    #[serde(default)]
    pub stream_ip: Option<IpAddr>,
    #[serde(default)]
    pub tls_cert: Option<PathBuf>,
    #[serde(default)]
    pub tls_key: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EngineSection {
    /// In-memory engine with the listed images preloaded on every host.
    Fake {
        #[serde(default = "default_fake_images")]
        images: Vec<String>,
    },
    Docker {
        endpoints: BTreeMap<HostId, String>,
        #[serde(default = "default_api_version")]
        api_version: String,
    },
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection::Fake { images: default_fake_images() }
    }
}

fn default_fake_images() -> Vec<String> {
    vec!["simdesk/stub-desktop:latest".into(), "simdesk/stub-sitl:latest".into()]
}

fn default_api_version() -> String {
    "v1.43".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenantConfig {
    pub id: TenantId,
    /// Suffix of the tenant's session hostnames.
    pub domain: String,
    /// Upper bound on any one session's limits.
    pub quota: ResourceLimits,
    #[serde(default = "one")]
    pub max_sessions_per_user: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticToken {
    pub token: String,
    pub subject: String,
    pub tenant: TenantId,
    pub role: Role,
    #[serde(default)]
    pub expires_at: Option<DateTime<Utc>>,
}

/// External identity check standing in for the upstream portal: the hook
/// receives the caller's session cookie and answers with who they are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityHookConfig {
    pub url: String,
    #[serde(default = "default_token_ttl")]
    pub token_ttl_secs: u64,
}

fn default_token_ttl() -> u64 {
    8 * 3600
}

/// Shortest accepted static token, in characters.
pub const MIN_TOKEN_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<ServerConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        text.parse()
    }

    /// Lifecycle configuration with tenant domains filled in.
    pub fn lifecycle_config(&self) -> LifecycleConfig {
        let mut cfg = self.lifecycle.clone();
        cfg.tenant_domains = self.tenants.iter().map(|t| (t.id.clone(), t.domain.clone())).collect();
        cfg
    }

    pub fn tenant(&self, id: &TenantId) -> Option<&TenantConfig> {
        self.tenants.iter().find(|t| &t.id == id)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.lifecycle.tenant_domains.is_empty() {
            return bad("set tenant domains in [[tenants]], not tenant_domains".into());
        }
        self.lifecycle_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.tenants.is_empty() {
            return bad("at least one tenant is required".into());
        }
        let mut ids = BTreeSet::new();
        let mut domains = BTreeSet::new();
        for t in &self.tenants {
            if !ids.insert(&t.id) {
                return bad(format!("duplicate tenant {}", t.id.0));
            }
            let domain = t.domain.trim_end_matches('.').to_ascii_lowercase();
            if domain.is_empty() || !domains.insert(domain) {
                return bad(format!("tenant {} domain {:?} is empty or already used", t.id.0, t.domain));
            }
            if !t.quota.is_well_formed() {
                return bad(format!("tenant {} quota must be positive", t.id.0));
            }
            if t.max_sessions_per_user == 0 {
                return bad(format!("tenant {} max_sessions_per_user must be at least 1", t.id.0));
            }
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.token.len() < MIN_TOKEN_LEN {
                return bad(format!("token {i} is shorter than {MIN_TOKEN_LEN} characters"));
            }
            if self.tenant(&tok.tenant).is_none() {
                return bad(format!("token {i} names unknown tenant {}", tok.tenant.0));
            }
        }
        if let Some(g) = &self.gateway {
            if g.tls_cert.is_some() != g.tls_key.is_some() {
                return bad("gateway tls_cert and tls_key go together".into());
            }
            if g.listen.port() != 0 && g.listen == self.api.listen {
                return bad("gateway and api listen on the same address".into());
            }
        }
        if let EngineSection::Docker { endpoints, .. } = &self.engine {
            for h in &self.lifecycle.hosts {
                let Some(ep) = endpoints.get(&h.id) else {
                    return bad(format!("no engine endpoint for host {}", h.id.0));
                };
                ep.parse::<EngineEndpoint>().map_err(ConfigError::Invalid)?;
            }
        }
        if self.api.snapshot_check_secs == 0 {
            return bad("snapshot_check_secs must be positive".into());
        }
        Ok(())
    }
}

impl std::str::FromStr for ServerConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<ServerConfig, ConfigError> {
        let cfg: ServerConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOKEN: &str = "0123456789abcdef0123456789abcdef";

    fn minimal() -> String {
        format!(
            r#"
[allocator]
domain = "openuas.us"
max_sessions = 60

[[tenants]]
id = "uas101"
domain = "openuas.us"
quota = {{ cpu_cores = 4.0, memory_bytes = 8589934592 }}

[[tokens]]
token = "{TOKEN}"
subject = "root"
tenant = "uas101"
role = "admin"
"#
        )
    }

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg: ServerConfig = minimal().parse().unwrap();
        assert_eq!(cfg.lifecycle.allocator.max_sessions, 60);
        assert_eq!(cfg.lifecycle.allocator.web_base, 4000);
        assert_eq!(cfg.lifecycle.snapshot.retention, 7);
        assert_eq!(cfg.lifecycle.hosts.len(), 1);
        assert_eq!(cfg.tenants[0].max_sessions_per_user, 1);
        assert_eq!(cfg.engine, EngineSection::default());
        assert_eq!(cfg.tokens[0].role, Role::Admin);
        let lc = cfg.lifecycle_config();
        assert_eq!(lc.tenant_domains[&TenantId::from("uas101")], "openuas.us");
    }

    #[test]
    fn full_sections() {
        let text = format!(
            r#"{}
[api]
listen = "127.0.0.1:9000"
journal = "/tmp/j"

[snapshot]
schedule = "03:30:00"
retention = 3

[gateway]
listen = "127.0.0.1:8443"
tls_cert = "c.pem"
tls_key = "k.pem"

[engine]
kind = "docker"
endpoints = {{ host0 = "unix:///var/run/docker.sock" }}
"#,
            minimal()
        );
        let cfg: ServerConfig = text.parse().unwrap();
        assert_eq!(cfg.api.listen.port(), 9000);
        assert_eq!(cfg.lifecycle.snapshot.retention, 3);
        assert_eq!(cfg.gateway.unwrap().tls_key, Some(PathBuf::from("k.pem")));
        assert!(matches!(cfg.engine, EngineSection::Docker { ref api_version, .. } if api_version == "v1.43"));
    }

    #[test]
    fn rejects_shared_domains() {
        let text = format!(
            "{}\n[[tenants]]\nid = \"other\"\ndomain = \"OpenUAS.us\"\nquota = {{ cpu_cores = 1.0, memory_bytes = 1 }}\n",
            minimal()
        );
        assert!(matches!(text.parse::<ServerConfig>(), Err(ConfigError::Invalid(m)) if m.contains("domain")));
    }

    #[test]
    fn rejects_short_tokens_and_missing_endpoints() {
        let short = minimal().replace(TOKEN, "abc");
        assert!(matches!(short.parse::<ServerConfig>(), Err(ConfigError::Invalid(_))));
        let docker = format!("{}\n[engine]\nkind = \"docker\"\nendpoints = {{}}\n", minimal());
        assert!(matches!(docker.parse::<ServerConfig>(), Err(ConfigError::Invalid(m)) if m.contains("host0")));
    }

    #[test]
    fn rejects_half_tls() {
        let text = format!("{}\n[gateway]\nlisten = \"127.0.0.1:8443\"\ntls_cert = \"c.pem\"\n", minimal());
        assert!(text.parse::<ServerConfig>().is_err());
    }
}
