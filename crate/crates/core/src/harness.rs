//! Scenario replay.
//!
//! A scenario is a JSON file naming a policy, issuer bindings, the keys the
//! broker trusts, and a timed list of events. Events run in order against a
//! [`ReplayTarget`] under a logical clock; `expect` events assert on the
//! outcome of the preceding `request` or `renew`. Signing keys are derived
//! from `(trust_domain, key_id)` so scenario files carry no key material and
//! two runs produce byte-identical traces.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use crate::identity::VerifyingKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditRecord, Verdict};
use crate::broker::{
    flatten_context, AccessRequest, Broker, BrokerConfig, LeaseStatus, LeaseSummary, RenewOptions,
    DEFAULT_TTL_SECONDS,
};
use crate::identity::{mint_workload_token, SigningKey, TrustBundle, TrustDomain};
use crate::issuers::{load_bindings, IssuerBinding};
use crate::justification::{ApprovalStatus, JustificationToken};
use crate::policy::{load_policy, PolicyDocument};

/// Deterministic signing key for `(trust_domain, key_id)` in replay fixtures.
pub fn replay_key(trust_domain: &str, key_id: &str) -> SigningKey {
    SigningKey::derive(&format!("intent-broker/replay/{trust_domain}/{key_id}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRef {
    pub trust_domain: String,
    pub key_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioBroker {
    pub trust_domain: String,
    #[serde(default = "default_ttl")]
    pub ttl_seconds: i64,
    #[serde(default)]
    pub name: Option<String>,
}

fn default_ttl() -> i64 {
    DEFAULT_TTL_SECONDS
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    MintIdentity {
        #[serde(rename = "as")]
        alias: String,
        spiffe_id: String,
        key_id: String,
        #[serde(default = "default_ttl")]
        ttl_seconds: i64,
        #[serde(default)]
        audience: Option<String>,
        #[serde(default)]
        selectors: BTreeMap<String, String>,
    },
    RegisterApproval {
        token_id: String,
        status: ApprovalStatus,
        approver: String,
        issued_at: DateTime<Utc>,
        expires: DateTime<Utc>,
        reason: String,
        source: String,
        key_id: String,
    },
    SetStatus {
        token_id: String,
        status: ApprovalStatus,
    },
    SetSla {
        service: String,
        state: String,
    },
    RaiseAlert {
        environment: String,
    },
    ClearAlert {
        environment: String,
    },
    SetRegistryAvailable {
        available: bool,
    },
    /// Adds a key to the broker's bundle (federating a new trust domain).
    TrustKey {
        trust_domain: String,
        key_id: String,
    },
    Request {
        identity: String,
        action: String,
        resource: String,
        #[serde(default)]
        justification_ref: Option<String>,
        #[serde(default = "empty_object")]
        context: serde_json::Value,
        #[serde(default, rename = "as")]
        alias: Option<String>,
    },
    Renew {
        lease: String,
        #[serde(default)]
        identity: Option<String>,
        #[serde(default)]
        justification_ref: Option<String>,
        #[serde(default, rename = "as")]
        alias: Option<String>,
    },
    Expect {
        decision: Verdict,
        #[serde(default)]
        reason_contains: Option<String>,
    },
    ExpectLease {
        lease: String,
        status: LeaseStatus,
        #[serde(default)]
        expires_at: Option<DateTime<Utc>>,
    },
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Event {
    /// Logical time; events without one run at the previous event's time.
    #[serde(default)]
    pub at: Option<DateTime<Utc>>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub policy: PathBuf,
    pub bindings: PathBuf,
    pub broker: ScenarioBroker,
    pub trust: Vec<KeyRef>,
    pub events: Vec<Event>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("event {index}: timestamps must be non-decreasing")]
    TimeOrder { index: usize },
    #[error("event {index}: {message}")]
    Event { index: usize, message: String },
    #[error("target: {0}")]
    Target(String),
}

/// A scenario with its policy and bindings files loaded.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub source: PathBuf,
    pub scenario: Scenario,
    pub policy: PolicyDocument,
    pub policy_text: String,
    pub bindings: Vec<IssuerBinding>,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })
}

impl LoadedScenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let scenario: Scenario =
            serde_json::from_str(&read(path)?).map_err(|e| ScenarioError::Parse {
                path: path.to_owned(),
                message: e.to_string(),
            })?;
        let mut last: Option<DateTime<Utc>> = None;
        for (index, e) in scenario.events.iter().enumerate() {
            if let Some(at) = e.at {
                if last.is_some_and(|l| at < l) {
                    return Err(ScenarioError::TimeOrder { index });
                }
                last = Some(at);
            }
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let policy_path = base.join(&scenario.policy);
        let policy_text = read(&policy_path)?;
        let policy = load_policy(&policy_text).map_err(|e| ScenarioError::Parse {
            path: policy_path.clone(),
            message: e.to_string(),
        })?;
        let bindings_path = base.join(&scenario.bindings);
        let bindings = load_bindings(&read(&bindings_path)?).map_err(|e| ScenarioError::Parse {
            path: bindings_path,
            message: e.to_string(),
        })?;
        Ok(Self {
            source: path.to_owned(),
            scenario,
            policy,
            policy_text,
            bindings,
        })
    }

    /// The bundle implied by the scenario's `trust` list.
    pub fn trust_bundle(&self) -> Result<TrustBundle, ScenarioError> {
        let mut bundle = TrustBundle::new();
        for k in &self.scenario.trust {
            add_replay_key(&mut bundle, &k.trust_domain, &k.key_id)
                .map_err(ScenarioError::Target)?;
        }
        Ok(bundle)
    }
}

fn add_replay_key(bundle: &mut TrustBundle, trust_domain: &str, key_id: &str) -> Result<(), String> {
    let td = TrustDomain::new(trust_domain).map_err(|e| e.to_string())?;
    bundle
        .add_key(td, key_id, replay_key(trust_domain, key_id).verifying_key())
        .map_err(|e| e.to_string())
}

/// Result of one request or renewal as seen by the harness.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptOutcome {
    pub decision: Verdict,
    pub reason: String,
    pub lease_id: Option<String>,
    pub audit_seq: Option<u64>,
}

/// The broker surface a scenario drives. Implemented in-process here and
/// over HTTP by the CLI.
pub trait ReplayTarget {
    fn register_approval(&mut self, token: JustificationToken, now: DateTime<Utc>) -> Result<(), String>;
    fn set_status(&mut self, token_id: &str, status: ApprovalStatus, now: DateTime<Utc>) -> Result<(), String>;
    fn set_sla(&mut self, service: &str, state: &str, now: DateTime<Utc>) -> Result<(), String>;
    fn set_alert(&mut self, environment: &str, active: bool, now: DateTime<Utc>) -> Result<(), String>;
    fn set_registry_available(&mut self, available: bool) -> Result<(), String>;
    fn trust_key(&mut self, trust_domain: &str, key_id: &str, key: VerifyingKey) -> Result<(), String>;
    fn request(&mut self, request: &AccessRequest, now: DateTime<Utc>) -> Result<AttemptOutcome, String>;
    fn renew(&mut self, lease_id: &str, options: &RenewOptions, now: DateTime<Utc>) -> Result<AttemptOutcome, String>;
    fn lease(&mut self, lease_id: &str, now: DateTime<Utc>) -> Result<LeaseSummary, String>;
}

pub struct InProcessTarget {
    broker: Arc<Broker>,
    bundle: TrustBundle,
}

impl InProcessTarget {
    pub fn new(loaded: &LoadedScenario) -> Result<Self, ScenarioError> {
        let b = &loaded.scenario.broker;
        let td = TrustDomain::new(&b.trust_domain).map_err(|e| ScenarioError::Target(e.to_string()))?;
        let mut config = BrokerConfig::new(td)
            .with_ttl(b.ttl_seconds)
            .map_err(|e| ScenarioError::Target(e.to_string()))?;
        if let Some(name) = &b.name {
            config = config.with_name(name);
        }
        let bundle = loaded.trust_bundle()?;
        let broker = Broker::builder(config, loaded.policy.clone(), bundle.clone())
            .bindings(loaded.bindings.clone())
            .build();
        Ok(Self {
            broker: Arc::new(broker),
            bundle,
        })
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }
}

fn outcome(result: Result<crate::broker::Grant, crate::broker::Denial>) -> AttemptOutcome {
    match result {
        Ok(g) => AttemptOutcome {
            decision: Verdict::Allow,
            reason: format!(
                "allowed by rule {}",
                g.decision.matched_rule.as_deref().unwrap_or("?")
            ),
            lease_id: Some(g.lease.lease_id),
            audit_seq: Some(g.audit_seq),
        },
        Err(d) => AttemptOutcome {
            decision: Verdict::Deny,
            reason: d.to_string(),
            lease_id: None,
            audit_seq: d.audit_seq,
        },
    }
}

impl ReplayTarget for InProcessTarget {
    fn register_approval(&mut self, token: JustificationToken, now: DateTime<Utc>) -> Result<(), String> {
        self.broker
            .registry()
            .register_approval(token, now)
            .map(drop)
            .map_err(|e| e.to_string())
    }

    fn set_status(&mut self, token_id: &str, status: ApprovalStatus, now: DateTime<Utc>) -> Result<(), String> {
        self.broker
            .registry()
            .set_status(token_id, status, now)
            .map(drop)
            .map_err(|e| e.to_string())
    }

    fn set_sla(&mut self, service: &str, state: &str, now: DateTime<Utc>) -> Result<(), String> {
        self.broker
            .signals()
            .set_sla(service, state, now)
            .map(drop)
            .map_err(|e| e.to_string())
    }

    fn set_alert(&mut self, environment: &str, active: bool, now: DateTime<Utc>) -> Result<(), String> {
        if active {
            self.broker.signals().raise_alert(environment, now);
        } else {
            self.broker.signals().clear_alert(environment, now);
        }
        Ok(())
    }

    fn set_registry_available(&mut self, available: bool) -> Result<(), String> {
        self.broker.registry().set_available(available);
        Ok(())
    }

    fn trust_key(&mut self, trust_domain: &str, key_id: &str, key: VerifyingKey) -> Result<(), String> {
        let td = TrustDomain::new(trust_domain).map_err(|e| e.to_string())?;
        self.bundle.add_key(td, key_id, key).map_err(|e| e.to_string())?;
        self.broker.replace_bundle(self.bundle.clone());
        Ok(())
    }

    fn request(&mut self, request: &AccessRequest, now: DateTime<Utc>) -> Result<AttemptOutcome, String> {
        Ok(outcome(self.broker.request_credentials(request, now)))
    }

    fn renew(&mut self, lease_id: &str, options: &RenewOptions, now: DateTime<Utc>) -> Result<AttemptOutcome, String> {
        Ok(outcome(self.broker.renew_lease(lease_id, options, now)))
    }

    fn lease(&mut self, lease_id: &str, now: DateTime<Utc>) -> Result<LeaseSummary, String> {
        self.broker
            .get_lease(lease_id)
            .map(|l| l.summary(now))
            .ok_or_else(|| format!("unknown lease {lease_id:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub event: usize,
    pub kind: &'static str,
    pub at: DateTime<Utc>,
    pub actual: Verdict,
    pub expected: Option<Verdict>,
    #[serde(rename = "match")]
    pub matched: bool,
    pub reason: String,
    pub lease_id: Option<String>,
    pub audit_seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeaseCheck {
    pub event: usize,
    pub lease_id: String,
    pub expected_status: LeaseStatus,
    pub actual_status: LeaseStatus,
    pub expected_expires_at: Option<DateTime<Utc>>,
    pub actual_expires_at: DateTime<Utc>,
    #[serde(rename = "match")]
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub records: Vec<TraceRecord>,
    pub lease_checks: Vec<LeaseCheck>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.records.iter().all(|r| r.matched) && self.lease_checks.iter().all(|c| c.matched)
    }

    /// Number of request and renew events executed.
    pub fn attempts(&self) -> usize {
        self.records.len()
    }

    pub fn mismatches(&self) -> impl Iterator<Item = usize> + '_ {
        self.records
            .iter()
            .filter(|r| !r.matched)
            .map(|r| r.event)
            .chain(self.lease_checks.iter().filter(|c| !c.matched).map(|c| c.event))
    }

    /// One JSON object per line, in event order, followed by a summary line.
    pub fn render(&self) -> String {
        let mut lines: Vec<(usize, String)> = self
            .records
            .iter()
            .map(|r| (r.event, serde_json::to_string(r).expect("trace serializes")))
            .chain(
                self.lease_checks
                    .iter()
                    .map(|c| (c.event, serde_json::to_string(c).expect("trace serializes"))),
            )
            .collect();
        lines.sort_by_key(|(e, _)| *e);
        let mut out = String::new();
        for (_, l) in lines {
            out.push_str(&l);
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{}",
            serde_json::json!({
                "scenario": self.name,
                "attempts": self.attempts(),
                "passed": self.passed(),
            })
        );
        out
    }
}

pub fn run_scenario(
    loaded: &LoadedScenario,
    target: &mut dyn ReplayTarget,
) -> Result<ScenarioReport, ScenarioError> {
    let scenario = &loaded.scenario;
    let mut now = scenario
        .events
        .iter()
        .find_map(|e| e.at)
        .unwrap_or(DateTime::UNIX_EPOCH);
    let mut identities: HashMap<String, String> = HashMap::new();
    let mut leases: HashMap<String, String> = HashMap::new();
    let mut report = ScenarioReport {
        name: scenario.name.clone(),
        records: Vec::new(),
        lease_checks: Vec::new(),
    };

    for (index, event) in scenario.events.iter().enumerate() {
        if let Some(at) = event.at {
            now = at;
        }
        let fail = |message: String| ScenarioError::Event { index, message };
        let identity = |alias: &str| {
            identities
                .get(alias)
                .cloned()
                .ok_or_else(|| fail(format!("unknown identity {alias:?}")))
        };
        match &event.kind {
            EventKind::MintIdentity {
                alias,
                spiffe_id,
                key_id,
                ttl_seconds,
                audience,
                selectors,
            } => {
                let subject = spiffe_id.parse().map_err(|e| fail(format!("{e}")))?;
                let audience = audience
                    .clone()
                    .or_else(|| scenario.broker.name.clone())
                    .unwrap_or_else(|| crate::broker::DEFAULT_BROKER_NAME.to_owned());
                let key = replay_key(
                    spiffe_id
                        .parse::<crate::identity::SpiffeId>()
                        .map(|i| i.trust_domain().to_string())
                        .unwrap_or_default()
                        .as_str(),
                    key_id,
                );
                let token = mint_workload_token(subject, selectors.clone(), &audience, *ttl_seconds, &key, key_id, now)
                    .map_err(|e| fail(e.to_string()))?;
                identities.insert(alias.clone(), token.encode());
            }
            EventKind::RegisterApproval {
                token_id,
                status,
                approver,
                issued_at,
                expires,
                reason,
                source,
                key_id,
            } => {
                let token = JustificationToken {
                    token_id: token_id.clone(),
                    status: *status,
                    approver: approver.clone(),
                    issued_at: *issued_at,
                    expires: *expires,
                    reason: reason.clone(),
                    source: source.clone(),
                    key_id: String::new(),
                    signature: Vec::new(),
                }
                .signed(&replay_key(crate::justification::APPROVALS_DOMAIN, key_id), key_id);
                target.register_approval(token, now).map_err(fail)?;
            }
            EventKind::SetStatus { token_id, status } => {
                target.set_status(token_id, *status, now).map_err(fail)?;
            }
            EventKind::SetSla { service, state } => {
                target.set_sla(service, state, now).map_err(fail)?;
            }
            EventKind::RaiseAlert { environment } => {
                target.set_alert(environment, true, now).map_err(fail)?;
            }
            EventKind::ClearAlert { environment } => {
                target.set_alert(environment, false, now).map_err(fail)?;
            }
            EventKind::SetRegistryAvailable { available } => {
                target.set_registry_available(*available).map_err(fail)?;
            }
            EventKind::TrustKey {
                trust_domain,
                key_id,
            } => {
                let key = replay_key(trust_domain, key_id).verifying_key();
                target.trust_key(trust_domain, key_id, key).map_err(fail)?;
            }
            EventKind::Request {
                identity: who,
                action,
                resource,
                justification_ref,
                context,
                alias,
            } => {
                let request = AccessRequest {
                    workload_token: identity(who)?,
                    action: action.clone(),
                    resource: resource.clone(),
                    justification_ref: justification_ref.clone(),
                    context: flatten_context(context).map_err(|e| fail(e.to_string()))?,
                };
                let out = target.request(&request, now).map_err(fail)?;
                record_attempt(&mut report, &mut leases, index, "request", now, out, alias.as_deref());
            }
            EventKind::Renew {
                lease,
                identity: who,
                justification_ref,
                alias,
            } => {
                let lease_id = leases
                    .get(lease)
                    .cloned()
                    .ok_or_else(|| fail(format!("unknown lease alias {lease:?}")))?;
                let options = RenewOptions {
                    workload_token: who.as_deref().map(identity).transpose()?,
                    justification_ref: justification_ref.clone(),
                };
                let out = target.renew(&lease_id, &options, now).map_err(fail)?;
                record_attempt(&mut report, &mut leases, index, "renew", now, out, alias.as_deref());
            }
            EventKind::Expect {
                decision,
                reason_contains,
            } => {
                let last = report
                    .records
                    .last_mut()
                    .ok_or_else(|| fail("expect with no preceding request or renew".into()))?;
                if last.expected.is_some() {
                    return Err(fail("second expect for the same attempt".into()));
                }
                last.expected = Some(*decision);
                last.matched = last.actual == *decision
                    && reason_contains
                        .as_ref()
                        .is_none_or(|needle| last.reason.contains(needle.as_str()));
            }
            EventKind::ExpectLease {
                lease,
                status,
                expires_at,
            } => {
                let lease_id = leases
                    .get(lease)
                    .cloned()
                    .ok_or_else(|| fail(format!("unknown lease alias {lease:?}")))?;
                let summary = target.lease(&lease_id, now).map_err(fail)?;
                report.lease_checks.push(LeaseCheck {
                    event: index,
                    matched: summary.status == *status
                        && expires_at.is_none_or(|t| t == summary.expires_at),
                    lease_id,
                    expected_status: *status,
                    actual_status: summary.status,
                    expected_expires_at: *expires_at,
                    actual_expires_at: summary.expires_at,
                });
            }
        }
    }
    Ok(report)
}

fn record_attempt(
    report: &mut ScenarioReport,
    leases: &mut HashMap<String, String>,
    event: usize,
    kind: &'static str,
    at: DateTime<Utc>,
    out: AttemptOutcome,
    alias: Option<&str>,
) {
    if let (Some(alias), Some(id)) = (alias, &out.lease_id) {
        leases.insert(alias.to_owned(), id.clone());
    }
    report.records.push(TraceRecord {
        event,
        kind,
        at,
        actual: out.decision,
        expected: None,
        matched: true,
        reason: out.reason,
        lease_id: out.lease_id,
        audit_seq: out.audit_seq,
    });
}

/// Replays a scenario file against a fresh in-process broker and returns
/// the report together with the broker's audit log.
pub fn replay_file(path: &Path) -> Result<(ScenarioReport, Vec<AuditRecord>), ScenarioError> {
    let loaded = LoadedScenario::load(path)?;
    let mut target = InProcessTarget::new(&loaded)?;
    let report = run_scenario(&loaded, &mut target)?;
    Ok((report, target.broker().audit().records()))
}
