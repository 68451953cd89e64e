//! Credential issuance behind the broker.
//!
//! [`MockIssuer`] stands in for a cloud token exchange: it derives credential
//! ids and secrets as keyed digests of the subject, role and validity window,
//! so identical inputs always yield identical credentials.

use std::collections::BTreeMap;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Duration, Utc};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::identity::WorkloadToken;
use crate::policy::{resource_matches, Matcher};
use crate::wire::FieldWriter;

/// Upper bound on any credential lifetime.
pub const MAX_CREDENTIAL_TTL_SECONDS: i64 = 900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssuerKind {
    StsLike,
    SecretRef,
}

impl IssuerKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::StsLike => "sts_like",
            Self::SecretRef => "secret_ref",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuerBinding {
    pub resource: Matcher,
    pub issuer_kind: IssuerKind,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedCredential {
    pub kind: IssuerKind,
    pub credential_id: String,
    pub secret_material: String,
    pub session_name: String,
    pub expiration: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IssuerError {
    #[error("workload token is not valid at issuance time")]
    ExpiredWorkloadToken,
    #[error("no issuer binding matches resource {0:?}")]
    NoBinding(String),
    #[error("ttl {0}s outside (0, {MAX_CREDENTIAL_TTL_SECONDS}]")]
    TtlOutOfRange(i64),
    #[error("binding is missing parameter {0:?}")]
    MissingParam(&'static str),
    #[error("issuer backend failure: {0}")]
    Backend(String),
    #[error("invalid bindings file: {0}")]
    Config(String),
}

pub fn load_bindings(text: &str) -> Result<Vec<IssuerBinding>, IssuerError> {
    serde_json::from_str(text).map_err(|e| IssuerError::Config(e.to_string()))
}

/// First binding in configured order whose matcher covers `resource`.
pub fn resolve_binding<'a>(
    bindings: &'a [IssuerBinding],
    resource: &str,
) -> Result<&'a IssuerBinding, IssuerError> {
    bindings
        .iter()
        .find(|b| resource_matches(&b.resource, resource))
        .ok_or_else(|| IssuerError::NoBinding(resource.to_owned()))
}

pub trait CredentialIssuer: Send + Sync {
    fn issue(
        &self,
        workload_token: &WorkloadToken,
        binding: &IssuerBinding,
        ttl_seconds: i64,
        now: DateTime<Utc>,
    ) -> Result<IssuedCredential, IssuerError>;
}

pub struct MockIssuer {
    key: Vec<u8>,
}

impl MockIssuer {
    pub fn new(key: impl Into<Vec<u8>>) -> Self {
        Self { key: key.into() }
    }

    fn digest(&self, label: &str, fields: &[u8]) -> [u8; 32] {
        let mut mac = Hmac::<Sha256>::new_from_slice(&self.key).expect("hmac takes any key length");
        mac.update(label.as_bytes());
        mac.update(fields);
        mac.finalize().into_bytes().into()
    }
}

impl Default for MockIssuer {
    fn default() -> Self {
        Self::new(b"intent-broker-mock-issuer".to_vec())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl CredentialIssuer for MockIssuer {
    fn issue(
        &self,
        workload_token: &WorkloadToken,
        binding: &IssuerBinding,
        ttl_seconds: i64,
        now: DateTime<Utc>,
    ) -> Result<IssuedCredential, IssuerError> {
        if !(workload_token.issued_at <= now && now < workload_token.expires_at) {
            return Err(IssuerError::ExpiredWorkloadToken);
        }
        if ttl_seconds <= 0 || ttl_seconds > MAX_CREDENTIAL_TTL_SECONDS {
            return Err(IssuerError::TtlOutOfRange(ttl_seconds));
        }
        let expiration = now + Duration::seconds(ttl_seconds);
        let param = |name: &'static str| {
            binding
                .params
                .get(name)
                .cloned()
                .ok_or(IssuerError::MissingParam(name))
        };
        let target = match binding.issuer_kind {
            IssuerKind::StsLike => param("role_identifier")?,
            IssuerKind::SecretRef => param("path")?,
        };
        let session_name = match binding.issuer_kind {
            IssuerKind::StsLike => param("session_name")?,
            IssuerKind::SecretRef => binding.params.get("session_name").cloned().unwrap_or_default(),
        };
        let mut w = FieldWriter::default();
        w.text(binding.issuer_kind.as_str());
        w.text(&workload_token.subject.to_string());
        w.text(&target);
        w.text(&session_name);
        w.instant(&now);
        w.instant(&expiration);
        let fields = w.finish();
        let id = hex(&self.digest("credential-id", &fields));
        let secret = self.digest("secret", &fields);
        let (credential_id, secret_material) = match binding.issuer_kind {
            IssuerKind::StsLike => (
                format!("ASIA{}", id[..16].to_uppercase()),
                URL_SAFE_NO_PAD.encode(secret),
            ),
            IssuerKind::SecretRef => (
                format!("sref-{}", &id[..16]),
                format!("{target}#{}", hex(&secret)),
            ),
        };
        Ok(IssuedCredential {
            kind: binding.issuer_kind,
            credential_id,
            secret_material,
            session_name,
            expiration,
        })
    }
}
