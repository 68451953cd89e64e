//! SPIFFE-style workload identity.
//!
//! Parsing and rendering of `spiffe://` identifiers, segment-bounded prefix
//! matching for tenant scoping, and signed workload tokens verified against
//! a (possibly federated) trust bundle.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use chrono::{DateTime, Duration, Utc};
use ed25519_dalek::{Signature, Signer, Verifier};
pub use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::{self, FieldReader, FieldWriter};

const SCHEME: &str = "spiffe://";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("missing \"spiffe://\" scheme in {0:?}")]
    MissingScheme(String),
    #[error("empty trust domain")]
    EmptyTrustDomain,
    #[error("empty or missing path")]
    MissingPath,
    #[error("empty path segment")]
    EmptySegment,
    #[error("\".\" and \"..\" are not allowed as path segments")]
    DotSegment,
    #[error("illegal character {ch:?} in {part}")]
    IllegalCharacter { ch: char, part: &'static str },
    #[error("trust domain may not start or end with '.' or '-'")]
    TrustDomainEdge,
}

/// Identity namespace with its own signing keys.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TrustDomain(String);

impl TrustDomain {
    pub fn new(name: &str) -> Result<Self, ParseError> {
        if name.is_empty() {
            return Err(ParseError::EmptyTrustDomain);
        }
        if let Some(ch) = name
            .chars()
            .find(|c| !(c.is_ascii_lowercase() || c.is_ascii_digit() || *c == '.' || *c == '-'))
        {
            return Err(ParseError::IllegalCharacter {
                ch,
                part: "trust domain",
            });
        }
        let edge = |c: char| c == '.' || c == '-';
        if name.starts_with(edge) || name.ends_with(edge) {
            return Err(ParseError::TrustDomainEdge);
        }
        Ok(Self(name.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TrustDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for TrustDomain {
    type Error = ParseError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(&value)
    }
}

impl From<TrustDomain> for String {
    fn from(value: TrustDomain) -> Self {
        value.0
    }
}

/// A workload identifier: `spiffe://<trust-domain>/<segment>/...`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SpiffeId {
    trust_domain: TrustDomain,
    segments: Vec<String>,
}

fn split_scheme(uri: &str) -> Result<(&str, Option<&str>), ParseError> {
    let rest = uri
        .strip_prefix(SCHEME)
        .ok_or_else(|| ParseError::MissingScheme(uri.to_owned()))?;
    Ok(match rest.find('/') {
        Some(i) => (&rest[..i], Some(&rest[i..])),
        None => (rest, None),
    })
}

fn parse_segments(path: &str) -> Result<Vec<String>, ParseError> {
    // `path` starts with '/'.
    path[1..]
        .split('/')
        .map(|seg| {
            if seg.is_empty() {
                return Err(ParseError::EmptySegment);
            }
            if seg == "." || seg == ".." {
                return Err(ParseError::DotSegment);
            }
            if let Some(ch) = seg
                .chars()
                .find(|c| !(c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_')))
            {
                return Err(ParseError::IllegalCharacter { ch, part: "path" });
            }
            Ok(seg.to_owned())
        })
        .collect()
}

pub fn parse_spiffe_id(uri: &str) -> Result<SpiffeId, ParseError> {
    let (domain, path) = split_scheme(uri)?;
    let trust_domain = TrustDomain::new(domain)?;
    let path = match path {
        None | Some("/") => return Err(ParseError::MissingPath),
        Some(p) => p,
    };
    Ok(SpiffeId {
        trust_domain,
        segments: parse_segments(path)?,
    })
}

impl SpiffeId {
    pub fn trust_domain(&self) -> &TrustDomain {
        &self.trust_domain
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn path(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            out.push('/');
            out.push_str(seg);
        }
        out
    }
}

impl fmt::Display for SpiffeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{SCHEME}{}{}", self.trust_domain, self.path())
    }
}

impl FromStr for SpiffeId {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_spiffe_id(s)
    }
}

impl TryFrom<String> for SpiffeId {
    type Error = ParseError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        parse_spiffe_id(&value)
    }
}

impl From<SpiffeId> for String {
    fn from(value: SpiffeId) -> Self {
        value.to_string()
    }
}

/// Trust domain plus zero or more leading path segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpiffePrefix {
    trust_domain: TrustDomain,
    segments: Vec<String>,
}

impl SpiffePrefix {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let (domain, path) = split_scheme(text)?;
        let trust_domain = TrustDomain::new(domain)?;
        let segments = match path {
            None | Some("/") => Vec::new(),
            Some(p) => parse_segments(p.strip_suffix('/').unwrap_or(p))?,
        };
        Ok(Self {
            trust_domain,
            segments,
        })
    }

    /// Segment-bounded: `spiffe://org/team-alpha` does not cover
    /// `spiffe://org/team-alphax/...`.
    pub fn covers(&self, id: &SpiffeId) -> bool {
        self.trust_domain == id.trust_domain
            && self.segments.len() <= id.segments.len()
            && self.segments.iter().zip(&id.segments).all(|(a, b)| a == b)
    }
}

pub fn matches_prefix(id: &SpiffeId, prefix: &str) -> Result<bool, ParseError> {
    Ok(SpiffePrefix::parse(prefix)?.covers(id))
}

/// Ed25519 private key used to sign workload and approval tokens.
#[derive(Clone)]
pub struct SigningKey(ed25519_dalek::SigningKey);

impl SigningKey {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    /// Deterministic key derived from a label. Used by replay fixtures so
    /// scenarios need not ship key material.
    pub fn derive(label: &str) -> Self {
        let seed: [u8; 32] = Sha256::digest(label.as_bytes()).into();
        Self::from_seed(seed)
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.0.verifying_key()
    }

    pub(crate) fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.0.sign(message).to_bytes().to_vec()
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKey")
            .field("public", &STANDARD.encode(self.verifying_key().as_bytes()))
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BundleError {
    #[error("invalid trust bundle JSON: {0}")]
    Json(String),
    #[error(transparent)]
    TrustDomain(#[from] ParseError),
    #[error("trust domain {0} has no keys")]
    EmptyEntry(String),
    #[error("duplicate key id {key_id:?} in trust domain {trust_domain}")]
    DuplicateKeyId { trust_domain: String, key_id: String },
    #[error("key {key_id:?} is not a valid public key: {detail}")]
    BadKey { key_id: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleKey {
    pub key_id: String,
    pub verification_key: VerifyingKey,
}

/// Verification keys per trust domain. Holding another domain's keys is
/// what federation means here.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrustBundle {
    entries: BTreeMap<TrustDomain, Vec<BundleKey>>,
}

#[derive(Serialize, Deserialize)]
struct BundleKeyJson {
    key_id: String,
    public_key: String,
}

impl TrustBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_key(
        &mut self,
        trust_domain: TrustDomain,
        key_id: impl Into<String>,
        verification_key: VerifyingKey,
    ) -> Result<(), BundleError> {
        let key_id = key_id.into();
        let keys = self.entries.entry(trust_domain.clone()).or_default();
        if keys.iter().any(|k| k.key_id == key_id) {
            return Err(BundleError::DuplicateKeyId {
                trust_domain: trust_domain.to_string(),
                key_id,
            });
        }
        keys.push(BundleKey {
            key_id,
            verification_key,
        });
        Ok(())
    }

    /// Adds every key of `other` that is not already present.
    pub fn federate(&mut self, other: &TrustBundle) -> Result<(), BundleError> {
        for (domain, keys) in &other.entries {
            for key in keys {
                let existing = self.key(domain, &key.key_id);
                match existing {
                    Some(k) if k == &key.verification_key => {}
                    Some(_) => {
                        return Err(BundleError::DuplicateKeyId {
                            trust_domain: domain.to_string(),
                            key_id: key.key_id.clone(),
                        })
                    }
                    None => self.add_key(domain.clone(), &key.key_id, key.verification_key)?,
                }
            }
        }
        Ok(())
    }

    pub fn domains(&self) -> impl Iterator<Item = &TrustDomain> {
        self.entries.keys()
    }

    pub fn contains_domain(&self, domain: &TrustDomain) -> bool {
        self.entries.contains_key(domain)
    }

    pub fn key(&self, domain: &TrustDomain, key_id: &str) -> Option<&VerifyingKey> {
        self.entries
            .get(domain)?
            .iter()
            .find(|k| k.key_id == key_id)
            .map(|k| &k.verification_key)
    }

    pub fn from_json(text: &str) -> Result<Self, BundleError> {
        let raw: BTreeMap<String, Vec<BundleKeyJson>> =
            serde_json::from_str(text).map_err(|e| BundleError::Json(e.to_string()))?;
        let mut bundle = Self::new();
        for (domain, keys) in raw {
            let td = TrustDomain::new(&domain)?;
            if keys.is_empty() {
                return Err(BundleError::EmptyEntry(domain));
            }
            for k in keys {
                let bytes = STANDARD
                    .decode(k.public_key.as_bytes())
                    .map_err(|e| BundleError::BadKey {
                        key_id: k.key_id.clone(),
                        detail: e.to_string(),
                    })?;
                let arr: [u8; 32] = bytes.try_into().map_err(|_| BundleError::BadKey {
                    key_id: k.key_id.clone(),
                    detail: "expected 32 bytes".into(),
                })?;
                let vk = VerifyingKey::from_bytes(&arr).map_err(|e| BundleError::BadKey {
                    key_id: k.key_id.clone(),
                    detail: e.to_string(),
                })?;
                bundle.add_key(td.clone(), k.key_id, vk)?;
            }
        }
        Ok(bundle)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<&str, Vec<BundleKeyJson>> = self
            .entries
            .iter()
            .map(|(d, keys)| {
                let keys = keys
                    .iter()
                    .map(|k| BundleKeyJson {
                        key_id: k.key_id.clone(),
                        public_key: STANDARD.encode(k.verification_key.as_bytes()),
                    })
                    .collect();
                (d.as_str(), keys)
            })
            .collect();
        serde_json::to_string_pretty(&raw).expect("bundle serializes")
    }
}

/// Signed, short-lived proof of a SPIFFE ID (stand-in for a JWT-SVID).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadToken {
    pub subject: SpiffeId,
    pub audience: String,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub selectors: BTreeMap<String, String>,
    pub key_id: String,
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MintError {
    #[error("ttl must be positive, got {0}s")]
    NonPositiveTtl(i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenDecodeError {
    #[error("token must be <fields>.<signature>")]
    Shape,
    #[error("invalid base64: {0}")]
    Base64(String),
    #[error("malformed canonical fields: {0}")]
    Fields(#[from] wire::WireError),
    #[error("bad subject: {0}")]
    Subject(#[from] ParseError),
}

/// Distinct, audit-visible reasons a workload token is refused.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("workload token expired at {}", crate::render_instant(expires_at))]
    Expired { expires_at: DateTime<Utc> },
    #[error("workload token not valid before {}", crate::render_instant(issued_at))]
    NotYetValid { issued_at: DateTime<Utc> },
    #[error("trust domain {0} is not in the trust bundle")]
    UnknownTrustDomain(String),
    #[error("key id {key_id:?} is not known for trust domain {trust_domain}")]
    UnknownKeyId { trust_domain: String, key_id: String },
    #[error("workload token signature does not verify")]
    SignatureMismatch,
    #[error("audience {actual:?} does not match expected {expected:?}")]
    AudienceMismatch { expected: String, actual: String },
    #[error("malformed workload token: {0}")]
    Malformed(String),
}

impl VerifyError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Expired { .. } => "expired",
            Self::NotYetValid { .. } => "not_yet_valid",
            Self::UnknownTrustDomain(_) => "unknown_trust_domain",
            Self::UnknownKeyId { .. } => "unknown_key_id",
            Self::SignatureMismatch => "signature_mismatch",
            Self::AudienceMismatch { .. } => "audience_mismatch",
            Self::Malformed(_) => "malformed",
        }
    }
}

impl WorkloadToken {
    /// Length-prefixed serialization of every field except the signature,
    /// in the order subject, audience, issued_at, expires_at, selectors
    /// (sorted by key), key_id.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = FieldWriter::default();
        w.text(&self.subject.to_string());
        w.text(&self.audience);
        w.instant(&self.issued_at);
        w.instant(&self.expires_at);
        w.count(self.selectors.len());
        for (k, v) in &self.selectors {
            w.text(k);
            w.text(v);
        }
        w.text(&self.key_id);
        w.finish()
    }

    /// Transport form: `base64url(canonical fields) "." base64url(signature)`.
    pub fn encode(&self) -> String {
        format!(
            "{}.{}",
            URL_SAFE_NO_PAD.encode(self.canonical_bytes()),
            URL_SAFE_NO_PAD.encode(&self.signature)
        )
    }

    pub fn decode(text: &str) -> Result<Self, TokenDecodeError> {
        let (fields, sig) = text.split_once('.').ok_or(TokenDecodeError::Shape)?;
        if sig.contains('.') {
            return Err(TokenDecodeError::Shape);
        }
        let b64 = |s: &str| {
            URL_SAFE_NO_PAD
                .decode(s.as_bytes())
                .map_err(|e| TokenDecodeError::Base64(e.to_string()))
        };
        let fields = b64(fields)?;
        let signature = b64(sig)?;
        let mut r = FieldReader::new(&fields);
        let subject = parse_spiffe_id(&r.text()?)?;
        let audience = r.text()?;
        let issued_at = r.instant()?;
        let expires_at = r.instant()?;
        let n = r.count()?;
        let mut selectors = BTreeMap::new();
        for _ in 0..n {
            let k = r.text()?;
            let v = r.text()?;
            selectors.insert(k, v);
        }
        let key_id = r.text()?;
        r.finish()?;
        Ok(Self {
            subject,
            audience,
            issued_at,
            expires_at,
            selectors,
            key_id,
            signature,
        })
    }
}

pub fn mint_workload_token(
    subject: SpiffeId,
    selectors: BTreeMap<String, String>,
    audience: &str,
    ttl_seconds: i64,
    signing_key: &SigningKey,
    key_id: &str,
    now: DateTime<Utc>,
) -> Result<WorkloadToken, MintError> {
    if ttl_seconds <= 0 {
        return Err(MintError::NonPositiveTtl(ttl_seconds));
    }
    let mut token = WorkloadToken {
        subject,
        audience: audience.to_owned(),
        issued_at: now,
        expires_at: now + Duration::seconds(ttl_seconds),
        selectors,
        key_id: key_id.to_owned(),
        signature: Vec::new(),
    };
    token.signature = signing_key.sign(&token.canonical_bytes());
    Ok(token)
}

/// Returns the token subject iff the signature verifies under the subject's
/// trust-domain entry, `now` lies in `[issued_at, expires_at)`, and the
/// audience matches when one is expected.
pub fn verify_workload_token(
    token: &WorkloadToken,
    bundle: &TrustBundle,
    now: DateTime<Utc>,
    expected_audience: Option<&str>,
) -> Result<SpiffeId, VerifyError> {
    let domain = token.subject.trust_domain();
    if !bundle.contains_domain(domain) {
        return Err(VerifyError::UnknownTrustDomain(domain.to_string()));
    }
    let key = bundle
        .key(domain, &token.key_id)
        .ok_or_else(|| VerifyError::UnknownKeyId {
            trust_domain: domain.to_string(),
            key_id: token.key_id.clone(),
        })?;
    verify_signature(key, &token.canonical_bytes(), &token.signature)
        .map_err(|_| VerifyError::SignatureMismatch)?;
    if token.expires_at <= token.issued_at {
        return Err(VerifyError::Malformed("expires_at must follow issued_at".into()));
    }
    if now >= token.expires_at {
        return Err(VerifyError::Expired {
            expires_at: token.expires_at,
        });
    }
    if now < token.issued_at {
        return Err(VerifyError::NotYetValid {
            issued_at: token.issued_at,
        });
    }
    if let Some(expected) = expected_audience {
        if token.audience != expected {
            return Err(VerifyError::AudienceMismatch {
                expected: expected.to_owned(),
                actual: token.audience.clone(),
            });
        }
    }
    Ok(token.subject.clone())
}

pub(crate) fn verify_signature(
    key: &VerifyingKey,
    message: &[u8],
    signature: &[u8],
) -> Result<(), ()> {
    let sig = Signature::from_slice(signature).map_err(|_| ())?;
    key.verify(message, &sig).map_err(|_| ())
}
