//! Bearer tokens and the principals they stand for.

use std::sync::RwLock;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use simdesk_core::{PrincipalId, TenantId, Timestamp};
use subtle::ConstantTimeEq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Instructor,
    Admin,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Student, Role::Instructor, Role::Admin];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub subject: PrincipalId,
    pub tenant: TenantId,
    pub role: Role,
}

impl Principal {
    pub fn new(subject: &str, tenant: &str, role: Role) -> Principal {
        Principal { subject: subject.into(), tenant: tenant.into(), role }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("unauthorized")]
pub struct Unauthorized;

/// Random bytes per issued token (256 bits).
pub const TOKEN_BYTES: usize = 32;

struct Entry {
    token: Vec<u8>,
    principal: Principal,
    /// Milliseconds since the epoch; `None` never expires.
    expires_at: Option<Timestamp>,
}

/// Live tokens. Lookups compare every stored token in constant time.
#[derive(Default)]
pub struct TokenStore {
    entries: RwLock<Vec<Entry>>,
}

impl TokenStore {
    /// Adds a token chosen elsewhere (seeded from configuration).
    pub fn insert(&self, token: &str, principal: Principal, expires_at: Option<Timestamp>) {
        let mut entries = self.entries.write().expect("token lock poisoned");
        entries.push(Entry { token: token.as_bytes().to_vec(), principal, expires_at });
    }

    /// Creates a fresh hex token for `principal`.
    pub fn issue(&self, principal: Principal, expires_at: Option<Timestamp>, now: Timestamp) -> String {
        let mut raw = [0u8; TOKEN_BYTES];
        rand::rngs::OsRng.fill_bytes(&mut raw);
        let token = hex::encode(raw);
        let mut entries = self.entries.write().expect("token lock poisoned");
        entries.retain(|e| e.expires_at.is_none_or(|t| t > now));
        entries.push(Entry { token: token.as_bytes().to_vec(), principal, expires_at });
        token
    }

    pub fn authenticate(&self, token: &str, now: Timestamp) -> Result<Principal, Unauthorized> {
        let presented = token.as_bytes();
        let entries = self.entries.read().expect("token lock poisoned");
        let mut found = None;
        for e in entries.iter() {
            if bool::from(e.token.ct_eq(presented)) {
                found = Some(e);
            }
        }
        match found {
            Some(e) if e.expires_at.is_none_or(|t| now < t) => Ok(e.principal.clone()),
            _ => Err(Unauthorized),
        }
    }

    /// Drops every token for `subject` in `tenant`.
    pub fn revoke(&self, subject: &PrincipalId, tenant: &TenantId) -> usize {
        let mut entries = self.entries.write().expect("token lock poisoned");
        let before = entries.len();
        entries.retain(|e| !(&e.principal.subject == subject && &e.principal.tenant == tenant));
        before - entries.len()
    }
}

/// Extracts the token from an `Authorization: Bearer <token>` value.
pub fn bearer(header: &str) -> Option<&str> {
    let (scheme, token) = header.trim().split_once(' ')?;
    let token = token.trim();
    (scheme.eq_ignore_ascii_case("bearer") && !token.is_empty()).then_some(token)
}
