use std::io;
use std::path::Path;
use std::sync::Arc;

use rustls::ServerConfig;

/// PEM-encoded certificate chain and private key.
#[derive(Clone)]
pub struct TlsMaterial {
    pub cert_chain_pem: String,
    pub key_pem: String,
}

impl std::fmt::Debug for TlsMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TlsMaterial").field("key_pem", &"<redacted>").finish_non_exhaustive()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TlsError {
    #[error("reading TLS material: {0}")]
    Io(#[from] io::Error),
    #[error("no certificate found in PEM")]
    NoCertificate,
    #[error("no private key found in PEM")]
    NoKey,
    #[error(transparent)]
    Rustls(#[from] rustls::Error),
}

impl TlsMaterial {
    pub fn from_files(cert: impl AsRef<Path>, key: impl AsRef<Path>) -> Result<TlsMaterial, TlsError> {
        Ok(TlsMaterial { cert_chain_pem: std::fs::read_to_string(cert)?, key_pem: std::fs::read_to_string(key)? })
    }

    pub(crate) fn server_config(&self) -> Result<Arc<ServerConfig>, TlsError> {
        let certs = rustls_pemfile::certs(&mut self.cert_chain_pem.as_bytes()).collect::<Result<Vec<_>, _>>()?;
        if certs.is_empty() {
            return Err(TlsError::NoCertificate);
        }
        let key = rustls_pemfile::private_key(&mut self.key_pem.as_bytes())?.ok_or(TlsError::NoKey)?;
        let provider = Arc::new(rustls::crypto::ring::default_provider());
        let mut cfg = ServerConfig::builder_with_provider(provider)
            .with_safe_default_protocol_versions()?
            .with_no_client_auth()
            .with_single_cert(certs, key)?;
        cfg.alpn_protocols = vec![b"http/1.1".to_vec()];
        Ok(Arc::new(cfg))
    }
}
