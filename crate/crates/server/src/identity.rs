//! External identity hook.
//!
//! The hook is an HTTP endpoint run by the upstream portal. We POST
//! `{"cookie": "<value>"}`; a 2xx answer carrying `{"subject", "tenant", "role"}`
//! vouches for the user, anything else rejects them.

use std::time::Duration;

use serde::Serialize;

use crate::auth::Principal;
use crate::config::IdentityHookConfig;

#[derive(Debug, thiserror::Error)]
pub enum IdentityError {
    #[error("identity hook rejected the cookie")]
    Rejected,
    #[error("identity hook unreachable: {0}")]
    Unreachable(String),
    #[error("identity hook answer unreadable: {0}")]
    Malformed(String),
}

pub struct IdentityHook {
    client: reqwest::Client,
    url: String,
    ttl: Duration,
}

#[derive(Serialize)]
struct Query<'a> {
    cookie: &'a str,
}

impl IdentityHook {
    pub fn new(cfg: &IdentityHookConfig) -> IdentityHook {
        let client = reqwest::Client::builder().timeout(Duration::from_secs(5)).build().expect("static client config");
        IdentityHook { client, url: cfg.url.clone(), ttl: Duration::from_secs(cfg.token_ttl_secs) }
    }

    /// Lifetime of tokens issued for hook-verified users.
    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub async fn verify(&self, cookie: &str) -> Result<Principal, IdentityError> {
        if cookie.is_empty() {
            return Err(IdentityError::Rejected);
        }
        let resp = self
            .client
            .post(&self.url)
            .json(&Query { cookie })
            .send()
            .await
            .map_err(|e| IdentityError::Unreachable(e.to_string()))?;
        if !resp.status().is_success() {
            tracing::info!(status = %resp.status(), "identity hook refused");
            return Err(IdentityError::Rejected);
        }
        resp.json::<Principal>().await.map_err(|e| IdentityError::Malformed(e.to_string()))
    }
}
