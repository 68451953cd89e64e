//! Registry of signed, time-bound human approvals.
//!
//! Tokens are verified once at registration; afterwards their stored status
//! may move between the non-derived states. Resolution is fail-closed: an
//! unknown id or an unavailable registry is an error, never an approval.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{verify_signature, SigningKey, TrustBundle, TrustDomain};
use crate::wire::FieldWriter;

/// Reserved trust-domain name under which approval-authority keys live.
pub const APPROVALS_DOMAIN: &str = "approvals";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApprovalStatus {
    Approved,
    Pending,
    Withdrawn,
    Rejected,
    Rollback,
    /// Derived from the clock; never stored.
    Expired,
}

impl ApprovalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Approved => "approved",
            Self::Pending => "pending",
            Self::Withdrawn => "withdrawn",
            Self::Rejected => "rejected",
            Self::Rollback => "rollback",
            Self::Expired => "expired",
        }
    }
}

impl fmt::Display for ApprovalStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown approval status {0:?}")]
pub struct UnknownStatus(pub String);

impl FromStr for ApprovalStatus {
    type Err = UnknownStatus;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "approved" => Self::Approved,
            "pending" => Self::Pending,
            "withdrawn" => Self::Withdrawn,
            "rejected" => Self::Rejected,
            "rollback" => Self::Rollback,
            "expired" => Self::Expired,
            other => return Err(UnknownStatus(other.to_owned())),
        })
    }
}

/// Signed approval payload. Field names match the wire format accepted by
/// `POST /v1/approvals`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JustificationToken {
    pub token_id: String,
    pub status: ApprovalStatus,
    pub approver: String,
    pub issued_at: DateTime<Utc>,
    pub expires: DateTime<Utc>,
    pub reason: String,
    pub source: String,
    pub key_id: String,
    #[serde(with = "crate::serde_b64")]
    pub signature: Vec<u8>,
}

impl JustificationToken {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = FieldWriter::default();
        w.text(&self.token_id);
        w.text(self.status.as_str());
        w.text(&self.approver);
        w.instant(&self.issued_at);
        w.instant(&self.expires);
        w.text(&self.reason);
        w.text(&self.source);
        w.text(&self.key_id);
        w.finish()
    }

    /// Sets `key_id` and replaces the signature.
    pub fn signed(mut self, key: &SigningKey, key_id: &str) -> Self {
        self.key_id = key_id.to_owned();
        self.signature = key.sign(&self.canonical_bytes());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedJustification {
    pub token_id: String,
    pub effective_status: ApprovalStatus,
    pub valid: bool,
    pub approver: String,
    pub source: String,
    pub expires: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JustificationError {
    #[error("approval key {0:?} is not a registered approval authority")]
    UnknownKey(String),
    #[error("approval token signature does not verify")]
    BadSignature,
    #[error("approval token expires at or before it was issued")]
    EmptyValidity,
    #[error("token {0:?} already registered with different content")]
    Conflict(String),
    #[error("unknown justification token {0:?}")]
    UnknownToken(String),
    #[error("status \"expired\" is derived from the clock and cannot be stored")]
    ExpiredNotStorable,
    #[error("justification registry unavailable")]
    Unavailable,
}

#[derive(Debug, Clone)]
struct Entry {
    token: JustificationToken,
    status: ApprovalStatus,
    updated_at: DateTime<Utc>,
}

/// Stored record returned by mutations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApprovalRecord {
    pub token_id: String,
    pub status: ApprovalStatus,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug)]
pub struct JustificationRegistry {
    authority: TrustBundle,
    entries: RwLock<HashMap<String, Entry>>,
    available: AtomicBool,
}

impl JustificationRegistry {
    /// `authority` is consulted only for its [`APPROVALS_DOMAIN`] entry.
    pub fn new(authority: TrustBundle) -> Self {
        Self {
            authority,
            entries: RwLock::new(HashMap::new()),
            available: AtomicBool::new(true),
        }
    }

    /// Simulates an outage of the approval backend.
    pub fn set_available(&self, available: bool) {
        self.available.store(available, Ordering::SeqCst);
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    fn check_available(&self) -> Result<(), JustificationError> {
        if self.is_available() {
            Ok(())
        } else {
            Err(JustificationError::Unavailable)
        }
    }

    pub fn register_approval(
        &self,
        token: JustificationToken,
        now: DateTime<Utc>,
    ) -> Result<String, JustificationError> {
        self.check_available()?;
        if token.status == ApprovalStatus::Expired {
            return Err(JustificationError::ExpiredNotStorable);
        }
        let domain = TrustDomain::new(APPROVALS_DOMAIN).expect("reserved domain is valid");
        let key = self
            .authority
            .key(&domain, &token.key_id)
            .ok_or_else(|| JustificationError::UnknownKey(token.key_id.clone()))?;
        verify_signature(key, &token.canonical_bytes(), &token.signature)
            .map_err(|_| JustificationError::BadSignature)?;
        if token.expires <= token.issued_at {
            return Err(JustificationError::EmptyValidity);
        }
        let mut entries = self.entries.write();
        if let Some(existing) = entries.get(&token.token_id) {
            return if existing.token == token {
                Ok(token.token_id)
            } else {
                Err(JustificationError::Conflict(token.token_id))
            };
        }
        let id = token.token_id.clone();
        entries.insert(
            id.clone(),
            Entry {
                status: token.status,
                token,
                updated_at: now,
            },
        );
        Ok(id)
    }

    pub fn set_status(
        &self,
        token_id: &str,
        new_status: ApprovalStatus,
        now: DateTime<Utc>,
    ) -> Result<ApprovalRecord, JustificationError> {
        self.check_available()?;
        if new_status == ApprovalStatus::Expired {
            return Err(JustificationError::ExpiredNotStorable);
        }
        let mut entries = self.entries.write();
        let entry = entries
            .get_mut(token_id)
            .ok_or_else(|| JustificationError::UnknownToken(token_id.to_owned()))?;
        entry.status = new_status;
        entry.updated_at = now;
        Ok(ApprovalRecord {
            token_id: token_id.to_owned(),
            status: new_status,
            updated_at: now,
        })
    }

    /// Expired when `now >= expires`, whatever the stored status.
    pub fn resolve(
        &self,
        token_id: &str,
        now: DateTime<Utc>,
    ) -> Result<ResolvedJustification, JustificationError> {
        self.check_available()?;
        let entries = self.entries.read();
        let entry = entries
            .get(token_id)
            .ok_or_else(|| JustificationError::UnknownToken(token_id.to_owned()))?;
        let effective_status = if now >= entry.token.expires {
            ApprovalStatus::Expired
        } else {
            entry.status
        };
        Ok(ResolvedJustification {
            token_id: token_id.to_owned(),
            effective_status,
            valid: effective_status == ApprovalStatus::Approved,
            approver: entry.token.approver.clone(),
            source: entry.token.source.clone(),
            expires: entry.token.expires,
        })
    }
}
