//! Intent-aware credential broker for CI/CD workloads.
//!
//! A request carries a signed workload identity, an optional reference to a
//! human approval, and free-form context. The [`broker::Broker`] verifies the
//! identity, resolves the approval, snapshots runtime signals, evaluates a
//! default-deny [`policy`], and only then issues a short-lived lease.
//! Access ends by refusing the next issuance, never by recalling a
//! credential already handed out.

pub mod audit;
pub mod broker;
pub mod harness;
pub mod identity;
pub mod issuers;
pub mod justification;
pub mod policy;
pub mod signals;
mod wire;

pub use wire::render_instant;

pub(crate) mod serde_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}
