//! The authorization control loop.
//!
//! Every request and renewal runs the same fixed pipeline: verify identity,
//! resolve the referenced justification, snapshot signals, evaluate policy,
//! issue a credential. Each terminal outcome appends exactly one audit
//! record. Renewal never extends a lease; it re-runs the pipeline and, on
//! success, creates a new lease. A denied renewal marks the old lease but
//! leaves its lifetime and credential untouched.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditEntry, AuditLog, Verdict};
use crate::identity::{verify_workload_token, SpiffeId, TrustBundle, TrustDomain, WorkloadToken};
use crate::issuers::{resolve_binding, CredentialIssuer, IssuedCredential, IssuerBinding, MockIssuer};
use crate::justification::{JustificationError, JustificationRegistry};
use crate::policy::{evaluate, load_policy, Decision, EvaluationInput, PolicyDocument, PolicyError, Scalar};
use crate::signals::SignalStore;

pub const DEFAULT_TTL_SECONDS: i64 = 900;
pub const MIN_TTL_SECONDS: i64 = 300;
pub const MAX_TTL_SECONDS: i64 = 900;
pub const DEFAULT_BROKER_NAME: &str = "intent-broker";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("ttl {0}s outside [{MIN_TTL_SECONDS}, {MAX_TTL_SECONDS}]")]
    TtlOutOfRange(i64),
    #[error("invalid broker config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerConfig {
    ttl_seconds: i64,
    trust_domain: TrustDomain,
    name: String,
    require_audience: bool,
}

impl BrokerConfig {
    pub fn new(trust_domain: TrustDomain) -> Self {
        Self {
            ttl_seconds: DEFAULT_TTL_SECONDS,
            trust_domain,
            name: DEFAULT_BROKER_NAME.to_owned(),
            require_audience: true,
        }
    }

    pub fn with_ttl(mut self, ttl_seconds: i64) -> Result<Self, ConfigError> {
        if !(MIN_TTL_SECONDS..=MAX_TTL_SECONDS).contains(&ttl_seconds) {
            return Err(ConfigError::TtlOutOfRange(ttl_seconds));
        }
        self.ttl_seconds = ttl_seconds;
        Ok(self)
    }

    /// Workload tokens must carry this name as their audience.
    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_audience_check(mut self, required: bool) -> Self {
        self.require_audience = required;
        self
    }

    pub fn ttl_seconds(&self) -> i64 {
        self.ttl_seconds
    }

    pub fn trust_domain(&self) -> &TrustDomain {
        &self.trust_domain
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// On-disk broker configuration. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerConfigFile {
    #[serde(default = "default_ttl")]
    pub ttl_seconds: i64,
    pub policy_path: PathBuf,
    pub bundle_path: PathBuf,
    pub trust_domain: String,
    #[serde(default)]
    pub bindings_path: Option<PathBuf>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub audit_path: Option<PathBuf>,
}

fn default_ttl() -> i64 {
    DEFAULT_TTL_SECONDS
}

impl BrokerConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.policy_path);
        rebase(&mut cfg.bundle_path);
        if let Some(p) = cfg.bindings_path.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.audit_path.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    pub fn broker_config(&self) -> Result<BrokerConfig, ConfigError> {
        let td = TrustDomain::new(&self.trust_domain)
            .map_err(|e| ConfigError::Invalid(format!("trust_domain: {e}")))?;
        let cfg = BrokerConfig::new(td).with_ttl(self.ttl_seconds)?;
        Ok(match &self.name {
            Some(n) => cfg.with_name(n),
            None => cfg,
        })
    }
}

/// Source of "now" for callers that do not pass an explicit instant.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Manually advanced clock for replay and tests.
#[derive(Debug)]
pub struct LogicalClock(Mutex<DateTime<Utc>>);

impl LogicalClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }

    pub fn set(&self, t: DateTime<Utc>) {
        *self.0.lock() = t;
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("context must be a JSON object")]
    NotObject,
    #[error("context key {0:?} holds an array or null; only scalars are allowed")]
    NonScalar(String),
}

/// Flattens nested JSON objects into dotted keys:
/// `{"deployment": {"window": "offpeak"}}` becomes `deployment.window`.
pub fn flatten_context(value: &serde_json::Value) -> Result<BTreeMap<String, Scalar>, ContextError> {
    fn walk(
        prefix: &str,
        v: &serde_json::Value,
        out: &mut BTreeMap<String, Scalar>,
    ) -> Result<(), ContextError> {
        use serde_json::Value;
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out)?;
                }
            }
            Value::Bool(b) => {
                out.insert(prefix.to_owned(), Scalar::Bool(*b));
            }
            Value::Number(n) => {
                out.insert(prefix.to_owned(), Scalar::Number(n.clone()));
            }
            Value::String(s) => {
                out.insert(prefix.to_owned(), Scalar::Text(s.clone()));
            }
            Value::Null | Value::Array(_) => return Err(ContextError::NonScalar(prefix.to_owned())),
        }
        Ok(())
    }
    if !value.is_object() {
        return Err(ContextError::NotObject);
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out)?;
    Ok(out)
}

/// Context namespace filled from the verified token's selectors. Caller
/// supplied keys under it are discarded.
pub const SELECTOR_CONTEXT_PREFIX: &str = "selector.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRequest {
    /// Transport-encoded workload token.
    pub workload_token: String,
    pub action: String,
    pub resource: String,
    pub justification_ref: Option<String>,
    pub context: BTreeMap<String, Scalar>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RenewOptions {
    /// Fresh workload token; defaults to the one the lease was issued under.
    pub workload_token: Option<String>,
    /// Replacement justification reference.
    pub justification_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaseStatus {
    Active,
    Expired,
    RenewalDenied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lease {
    pub lease_id: String,
    pub spiffe_id: SpiffeId,
    pub action: String,
    pub resource: String,
    pub justification_ref: Option<String>,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub credential: IssuedCredential,
    /// Lease this one replaced, for renewals.
    pub renewal_of: Option<String>,
    renewal_denied: bool,
}

impl Lease {
    pub fn status(&self, now: DateTime<Utc>) -> LeaseStatus {
        if now >= self.expires_at {
            LeaseStatus::Expired
        } else if self.renewal_denied {
            LeaseStatus::RenewalDenied
        } else {
            LeaseStatus::Active
        }
    }
}

/// Lease as reported outside the direct issuance response; no secret.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseSummary {
    pub lease_id: String,
    pub spiffe_id: String,
    pub action: String,
    pub resource: String,
    pub justification_ref: Option<String>,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub status: LeaseStatus,
    pub credential_id: String,
    pub session_name: String,
    pub renewal_of: Option<String>,
}

impl Lease {
    pub fn summary(&self, now: DateTime<Utc>) -> LeaseSummary {
        LeaseSummary {
            lease_id: self.lease_id.clone(),
            spiffe_id: self.spiffe_id.to_string(),
            action: self.action.clone(),
            resource: self.resource.clone(),
            justification_ref: self.justification_ref.clone(),
            issued_at: self.issued_at,
            expires_at: self.expires_at,
            status: self.status(now),
            credential_id: self.credential.credential_id.clone(),
            session_name: self.credential.session_name.clone(),
            renewal_of: self.renewal_of.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenialStage {
    Identity,
    Justification,
    Policy,
    Issuer,
    NotFound,
    Internal,
}

impl DenialStage {
    pub fn code(self) -> &'static str {
        match self {
            Self::Identity => "identity_error",
            Self::Justification => "justification_error",
            Self::Policy => "policy_deny",
            Self::Issuer => "issuer_error",
            Self::NotFound => "not_found",
            Self::Internal => "internal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Denial {
    pub stage: DenialStage,
    pub message: String,
    /// True when a dependency (registry, audit store) was unavailable.
    pub unavailable: bool,
    pub decision: Option<Box<Decision>>,
    /// `None` only when the audit append itself failed.
    pub audit_seq: Option<u64>,
}

impl fmt::Display for Denial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage.code(), self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Grant {
    pub lease: Lease,
    pub decision: Decision,
    pub audit_seq: u64,
}

#[derive(Debug, Clone, Default)]
pub struct LeaseFilter {
    pub spiffe_id: Option<String>,
    pub status: Option<LeaseStatus>,
}

#[derive(Debug, Clone)]
struct LeaseRecord {
    lease: Lease,
    workload_token: String,
    context: BTreeMap<String, Scalar>,
}

#[derive(Debug, Default)]
struct Ledger {
    issued: u64,
    leases: BTreeMap<String, LeaseRecord>,
}

/// Everything the pipeline learned before the terminal step, used to
/// write the audit record.
struct Attempt<'a> {
    spiffe_id: Option<SpiffeId>,
    request: &'a AccessRequest,
    label: String,
}

struct Rejection {
    stage: DenialStage,
    message: String,
    unavailable: bool,
    decision: Option<Box<Decision>>,
}

impl Rejection {
    fn new(stage: DenialStage, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
            unavailable: false,
            decision: None,
        }
    }
}

pub struct Broker {
    config: BrokerConfig,
    policy: RwLock<Arc<PolicyDocument>>,
    bundle: RwLock<Arc<TrustBundle>>,
    bindings: RwLock<Arc<Vec<IssuerBinding>>>,
    issuer: Box<dyn CredentialIssuer>,
    registry: Arc<JustificationRegistry>,
    signals: Arc<SignalStore>,
    audit: Arc<AuditLog>,
    ledger: Mutex<Ledger>,
    renewal_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl fmt::Debug for Broker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Broker")
            .field("config", &self.config)
            .field("policy_version", &self.policy_version())
            .finish_non_exhaustive()
    }
}

pub struct BrokerBuilder {
    config: BrokerConfig,
    policy: PolicyDocument,
    bundle: TrustBundle,
    bindings: Vec<IssuerBinding>,
    issuer: Option<Box<dyn CredentialIssuer>>,
    registry: Option<Arc<JustificationRegistry>>,
    signals: Option<Arc<SignalStore>>,
    audit: Option<Arc<AuditLog>>,
}

impl BrokerBuilder {
    pub fn bindings(mut self, bindings: Vec<IssuerBinding>) -> Self {
        self.bindings = bindings;
        self
    }

    pub fn issuer(mut self, issuer: Box<dyn CredentialIssuer>) -> Self {
        self.issuer = Some(issuer);
        self
    }

    pub fn registry(mut self, registry: Arc<JustificationRegistry>) -> Self {
        self.registry = Some(registry);
        self
    }

    pub fn signals(mut self, signals: Arc<SignalStore>) -> Self {
        self.signals = Some(signals);
        self
    }

    pub fn audit(mut self, audit: Arc<AuditLog>) -> Self {
        self.audit = Some(audit);
        self
    }

    /// Without an explicit registry, approval keys are taken from the
    /// bundle's `approvals` entry.
    pub fn build(self) -> Broker {
        let registry = self
            .registry
            .unwrap_or_else(|| Arc::new(JustificationRegistry::new(self.bundle.clone())));
        Broker {
            config: self.config,
            policy: RwLock::new(Arc::new(self.policy)),
            bundle: RwLock::new(Arc::new(self.bundle)),
            bindings: RwLock::new(Arc::new(self.bindings)),
            issuer: self.issuer.unwrap_or_else(|| Box::new(MockIssuer::default())),
            registry,
            signals: self.signals.unwrap_or_default(),
            audit: self.audit.unwrap_or_default(),
            ledger: Mutex::new(Ledger::default()),
            renewal_locks: Mutex::new(HashMap::new()),
        }
    }
}

impl Broker {
    pub fn builder(config: BrokerConfig, policy: PolicyDocument, bundle: TrustBundle) -> BrokerBuilder {
        BrokerBuilder {
            config,
            policy,
            bundle,
            bindings: Vec::new(),
            issuer: None,
            registry: None,
            signals: None,
            audit: None,
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    pub fn registry(&self) -> &Arc<JustificationRegistry> {
        &self.registry
    }

    pub fn signals(&self) -> &Arc<SignalStore> {
        &self.signals
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    pub fn policy(&self) -> Arc<PolicyDocument> {
        self.policy.read().clone()
    }

    pub fn policy_version(&self) -> String {
        self.policy.read().version().to_owned()
    }

    pub fn bundle_domains(&self) -> Vec<String> {
        self.bundle.read().domains().map(|d| d.to_string()).collect()
    }

    /// Swaps the active policy. Evaluations already running keep the
    /// document they started with.
    pub fn replace_policy(&self, doc: PolicyDocument) {
        *self.policy.write() = Arc::new(doc);
    }

    /// Parses `text` and swaps it in; on error the active policy is kept.
    pub fn reload_policy(&self, text: &str) -> Result<String, PolicyError> {
        let doc = load_policy(text)?;
        let version = doc.version().to_owned();
        self.replace_policy(doc);
        Ok(version)
    }

    pub fn replace_bundle(&self, bundle: TrustBundle) {
        *self.bundle.write() = Arc::new(bundle);
    }

    pub fn replace_bindings(&self, bindings: Vec<IssuerBinding>) {
        *self.bindings.write() = Arc::new(bindings);
    }

    pub fn request_credentials(&self, request: &AccessRequest, now: DateTime<Utc>) -> Result<Grant, Denial> {
        self.run(request, now, "request".to_owned(), None)
    }

    pub fn renew_lease(&self, lease_id: &str, options: &RenewOptions, now: DateTime<Utc>) -> Result<Grant, Denial> {
        let guard = self
            .renewal_locks
            .lock()
            .entry(lease_id.to_owned())
            .or_default()
            .clone();
        let _serialized = guard.lock();

        let record = self.ledger.lock().leases.get(lease_id).cloned();
        let Some(record) = record else {
            let rejection = Rejection::new(DenialStage::NotFound, format!("unknown lease {lease_id:?}"));
            let entry = AuditEntry {
                spiffe_id: None,
                action: String::new(),
                resource: String::new(),
                decision: Verdict::Deny,
                reason: format!("renew {lease_id}: {}: {}", rejection.stage.code(), rejection.message),
                rule_id: None,
                lease_id: None,
                justification_ref: None,
            };
            return Err(self.deny_with(entry, rejection, now));
        };
        let request = AccessRequest {
            workload_token: options
                .workload_token
                .clone()
                .unwrap_or_else(|| record.workload_token.clone()),
            action: record.lease.action.clone(),
            resource: record.lease.resource.clone(),
            justification_ref: options
                .justification_ref
                .clone()
                .or_else(|| record.lease.justification_ref.clone()),
            context: record.context.clone(),
        };
        let outcome = self.run(&request, now, format!("renew {lease_id}"), Some(lease_id));
        if outcome.is_err() {
            if let Some(r) = self.ledger.lock().leases.get_mut(lease_id) {
                r.lease.renewal_denied = true;
            }
        }
        outcome
    }

    pub fn get_lease(&self, lease_id: &str) -> Option<Lease> {
        self.ledger.lock().leases.get(lease_id).map(|r| r.lease.clone())
    }

    pub fn list_leases(&self, filter: &LeaseFilter, now: DateTime<Utc>) -> Vec<Lease> {
        self.ledger
            .lock()
            .leases
            .values()
            .map(|r| &r.lease)
            .filter(|l| filter.spiffe_id.as_ref().is_none_or(|s| *s == l.spiffe_id.to_string()))
            .filter(|l| filter.status.is_none_or(|s| s == l.status(now)))
            .cloned()
            .collect()
    }

    fn run(
        &self,
        request: &AccessRequest,
        now: DateTime<Utc>,
        label: String,
        renewal_of: Option<&str>,
    ) -> Result<Grant, Denial> {
        let mut attempt = Attempt {
            spiffe_id: None,
            request,
            label,
        };
        match self.pipeline(&mut attempt, now) {
            Ok((token, decision)) => self.commit(&attempt, token, decision, now, renewal_of),
            Err(rejection) => Err(self.deny(&attempt, rejection, now)),
        }
    }

    fn pipeline(
        &self,
        attempt: &mut Attempt<'_>,
        now: DateTime<Utc>,
    ) -> Result<(WorkloadToken, Decision), Rejection> {
        let request = attempt.request;
        if request.action.is_empty() || request.resource.is_empty() {
            return Err(Rejection::new(DenialStage::Policy, "action and resource must be non-empty"));
        }

        let token = WorkloadToken::decode(&request.workload_token).map_err(|e| {
            Rejection::new(DenialStage::Identity, format!("malformed workload token: {e}"))
        })?;
        let bundle = self.bundle.read().clone();
        let audience = self.config.require_audience.then_some(self.config.name.as_str());
        let spiffe_id = verify_workload_token(&token, &bundle, now, audience)
            .map_err(|e| Rejection::new(DenialStage::Identity, format!("{}: {e}", e.kind())))?;
        attempt.spiffe_id = Some(spiffe_id.clone());

        let justification = match &request.justification_ref {
            Some(id) => Some(self.registry.resolve(id, now).map_err(|e| Rejection {
                unavailable: e == JustificationError::Unavailable,
                ..Rejection::new(DenialStage::Justification, e.to_string())
            })?),
            None => None,
        };

        let signals = self.signals.snapshot(now);

        let policy = self.policy.read().clone();
        let mut input = EvaluationInput::new(spiffe_id, &request.action, &request.resource, now)
            .with_signals(signals);
        input.context = request
            .context
            .iter()
            .filter(|(k, _)| !k.starts_with(SELECTOR_CONTEXT_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .chain(token.selectors.iter().map(|(k, v)| {
                (format!("{SELECTOR_CONTEXT_PREFIX}{k}"), Scalar::Text(v.clone()))
            }))
            .collect();
        input.justification = justification.clone();
        let decision = evaluate(&policy, &input);
        if !decision.allow {
            let message = decision.denial_reason.clone().unwrap_or_default();
            return Err(Rejection {
                decision: Some(Box::new(decision)),
                ..Rejection::new(DenialStage::Policy, message)
            });
        }
        if let Some(j) = justification.filter(|j| !j.valid) {
            return Err(Rejection {
                decision: Some(Box::new(decision)),
                ..Rejection::new(
                    DenialStage::Justification,
                    format!("justification {:?} is {}", j.token_id, j.effective_status),
                )
            });
        }
        Ok((token, decision))
    }

    fn commit(
        &self,
        attempt: &Attempt<'_>,
        token: WorkloadToken,
        decision: Decision,
        now: DateTime<Utc>,
        renewal_of: Option<&str>,
    ) -> Result<Grant, Denial> {
        let request = attempt.request;
        let ttl = self.config.ttl_seconds;
        let expires_at = now + Duration::seconds(ttl);
        let bindings = self.bindings.read().clone();
        let credential = resolve_binding(&bindings, &request.resource)
            .and_then(|b| self.issuer.issue(&token, b, ttl, now))
            .map_err(|e| Rejection::new(DenialStage::Issuer, e.to_string()))
            .and_then(|c| {
                if c.expiration > expires_at {
                    Err(Rejection::new(DenialStage::Issuer, "issued credential outlives its lease"))
                } else {
                    Ok(c)
                }
            });
        let credential = match credential {
            Ok(c) => c,
            Err(r) => {
                return Err(self.deny(
                    attempt,
                    Rejection {
                        decision: Some(Box::new(decision)),
                        ..r
                    },
                    now,
                ))
            }
        };

        let mut ledger = self.ledger.lock();
        let lease_id = format!("lease-{:06}", ledger.issued + 1);
        let rule = decision.matched_rule.clone();
        let entry = AuditEntry {
            spiffe_id: attempt.spiffe_id.as_ref().map(ToString::to_string),
            action: request.action.clone(),
            resource: request.resource.clone(),
            decision: Verdict::Allow,
            reason: format!(
                "{}: allowed by rule {}",
                attempt.label,
                rule.as_deref().unwrap_or("?")
            ),
            rule_id: rule,
            lease_id: Some(lease_id.clone()),
            justification_ref: request.justification_ref.clone(),
        };
        let record = match self.audit.append(entry, now) {
            Ok(r) => r,
            Err(e) => {
                drop(ledger);
                return Err(Denial {
                    stage: DenialStage::Internal,
                    message: e.to_string(),
                    unavailable: true,
                    decision: Some(Box::new(decision)),
                    audit_seq: None,
                });
            }
        };
        ledger.issued += 1;
        let lease = Lease {
            lease_id: lease_id.clone(),
            spiffe_id: attempt.spiffe_id.clone().expect("verified before commit"),
            action: request.action.clone(),
            resource: request.resource.clone(),
            justification_ref: request.justification_ref.clone(),
            issued_at: now,
            expires_at,
            credential,
            renewal_of: renewal_of.map(str::to_owned),
            renewal_denied: false,
        };
        ledger.leases.insert(
            lease_id,
            LeaseRecord {
                lease: lease.clone(),
                workload_token: request.workload_token.clone(),
                context: request.context.clone(),
            },
        );
        Ok(Grant {
            lease,
            decision,
            audit_seq: record.seq,
        })
    }

    fn deny(&self, attempt: &Attempt<'_>, rejection: Rejection, now: DateTime<Utc>) -> Denial {
        let request = attempt.request;
        let entry = AuditEntry {
            spiffe_id: attempt.spiffe_id.as_ref().map(ToString::to_string),
            action: request.action.clone(),
            resource: request.resource.clone(),
            decision: Verdict::Deny,
            reason: format!("{}: {}: {}", attempt.label, rejection.stage.code(), rejection.message),
            rule_id: None,
            lease_id: None,
            justification_ref: request.justification_ref.clone(),
        };
        self.deny_with(entry, rejection, now)
    }

    fn deny_with(&self, entry: AuditEntry, rejection: Rejection, now: DateTime<Utc>) -> Denial {
        // Hold the ledger so denials and grants share one total order.
        let _ledger = self.ledger.lock();
        match self.audit.append(entry, now) {
            Ok(record) => Denial {
                stage: rejection.stage,
                message: rejection.message,
                unavailable: rejection.unavailable,
                decision: rejection.decision,
                audit_seq: Some(record.seq),
            },
            Err(e) => Denial {
                stage: DenialStage::Internal,
                message: format!("{}; {e}", rejection.message),
                unavailable: true,
                decision: rejection.decision,
                audit_seq: None,
            },
        }
    }
}
