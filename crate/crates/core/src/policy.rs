//! Default-deny permit policies over identity, justification, time and
//! runtime signals.
//!
//! A document is an ordered list of permit rules. A request is allowed iff
//! some rule matches its principal, action and resource and every condition
//! of that rule holds. Conditions that reference missing data evaluate to
//! false, so gaps in the input can only ever cause a denial.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use chrono::{DateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{ParseError, SpiffeId, SpiffePrefix};
use crate::justification::{ApprovalStatus, ResolvedJustification};
use crate::signals::{SignalSnapshot, SlaLevel};
use crate::wire::render_instant;

/// Minutes since midnight, written `HH:MM` (24-hour).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClockTime(u16);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid clock time {0:?} (expected HH:MM, 00:00..23:59)")]
pub struct ClockTimeError(pub String);

impl ClockTime {
    pub fn from_minutes(minutes: u16) -> Option<Self> {
        (minutes < 24 * 60).then_some(Self(minutes))
    }

    pub fn of(t: &DateTime<Utc>) -> Self {
        Self((t.hour() * 60 + t.minute()) as u16)
    }

    pub fn minutes(self) -> u16 {
        self.0
    }

    /// Inclusive at both ends. `start > end` wraps past midnight.
    pub fn within(self, start: ClockTime, end: ClockTime) -> bool {
        if start <= end {
            start <= self && self <= end
        } else {
            self >= start || self <= end
        }
    }
}

impl FromStr for ClockTime {
    type Err = ClockTimeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ClockTimeError(s.to_owned());
        let b = s.as_bytes();
        if b.len() != 5 || b[2] != b':' {
            return Err(err());
        }
        let two = |hi: u8, lo: u8| -> Option<u16> {
            (hi.is_ascii_digit() && lo.is_ascii_digit())
                .then(|| u16::from(hi - b'0') * 10 + u16::from(lo - b'0'))
        };
        let h = two(b[0], b[1]).ok_or_else(err)?;
        let m = two(b[3], b[4]).ok_or_else(err)?;
        if h > 23 || m > 59 {
            return Err(err());
        }
        Ok(Self(h * 60 + m))
    }
}

impl fmt::Display for ClockTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.0 / 60, self.0 % 60)
    }
}

impl TryFrom<String> for ClockTime {
    type Error = ClockTimeError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ClockTime> for String {
    fn from(value: ClockTime) -> Self {
        value.to_string()
    }
}

pub fn within_daily_window(t: &str, start: &str, end: &str) -> Result<bool, ClockTimeError> {
    Ok(t.parse::<ClockTime>()?.within(start.parse()?, end.parse()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Prefix,
}

/// Raw `{kind, value}` matcher as written in policy and bindings files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    pub kind: MatchKind,
    pub value: String,
}

impl Matcher {
    pub fn exact(value: impl Into<String>) -> Self {
        Self {
            kind: MatchKind::Exact,
            value: value.into(),
        }
    }

    pub fn prefix(value: impl Into<String>) -> Self {
        Self {
            kind: MatchKind::Prefix,
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Matcher", into = "Matcher")]
pub enum PrincipalMatcher {
    Exact(SpiffeId),
    Prefix(SpiffePrefixText),
}

/// A validated SPIFFE prefix that remembers its source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpiffePrefixText {
    text: String,
    prefix: SpiffePrefix,
}

impl PrincipalMatcher {
    pub fn matches(&self, id: &SpiffeId) -> bool {
        match self {
            Self::Exact(want) => want == id,
            Self::Prefix(p) => p.prefix.covers(id),
        }
    }
}

impl TryFrom<Matcher> for PrincipalMatcher {
    type Error = ParseError;
    fn try_from(m: Matcher) -> Result<Self, Self::Error> {
        Ok(match m.kind {
            MatchKind::Exact => Self::Exact(m.value.parse()?),
            MatchKind::Prefix => Self::Prefix(SpiffePrefixText {
                prefix: SpiffePrefix::parse(&m.value)?,
                text: m.value,
            }),
        })
    }
}

impl From<PrincipalMatcher> for Matcher {
    fn from(p: PrincipalMatcher) -> Self {
        match p {
            PrincipalMatcher::Exact(id) => Matcher::exact(id.to_string()),
            PrincipalMatcher::Prefix(p) => Matcher::prefix(p.text),
        }
    }
}

/// Resource matching. Prefixes compare whole `/`-separated segments, so
/// `s3://bucket` covers `s3://bucket/app` but not `s3://bucket-2`.
pub fn resource_matches(matcher: &Matcher, resource: &str) -> bool {
    match matcher.kind {
        MatchKind::Exact => matcher.value == resource,
        MatchKind::Prefix => {
            let prefix = matcher.value.strip_suffix('/').unwrap_or(&matcher.value);
            let mut have = resource.split('/');
            prefix.split('/').all(|seg| have.next() == Some(seg))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(serde_json::Number),
    Text(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bool(b) => write!(f, "{b}"),
            Self::Number(n) => write!(f, "{n}"),
            Self::Text(s) => write!(f, "{s:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Condition {
    ContextEquals { path: String, value: String },
    ContextBoolIs { path: String, expected: bool },
    JustificationStatusIs { status: ApprovalStatus },
    JustificationRefIs { token_id: String },
    TokenValidNow,
    DailyWindow { start: ClockTime, end: ClockTime },
    TimestampBetween { start: DateTime<Utc>, end: DateTime<Utc> },
    SlaStateIs { service: String, state: SlaLevel },
    NoActiveAlert { environment: String },
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ContextEquals { path, value } => write!(f, "context_equals({path} == {value:?})"),
            Self::ContextBoolIs { path, expected } => {
                write!(f, "context_bool_is({path} == {expected})")
            }
            Self::JustificationStatusIs { status } => {
                write!(f, "justification_status_is({status})")
            }
            Self::JustificationRefIs { token_id } => {
                write!(f, "justification_ref_is({token_id:?})")
            }
            Self::TokenValidNow => f.write_str("token_valid_now"),
            Self::DailyWindow { start, end } => write!(f, "daily_window({start}..={end})"),
            Self::TimestampBetween { start, end } => write!(
                f,
                "timestamp_between({}..={})",
                render_instant(start),
                render_instant(end)
            ),
            Self::SlaStateIs { service, state } => write!(f, "sla_state_is({service} == {state})"),
            Self::NoActiveAlert { environment } => write!(f, "no_active_alert({environment})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub principal: PrincipalMatcher,
    pub action: String,
    pub resource: Matcher,
    #[serde(default)]
    pub conditions: Vec<Condition>,
}

impl Rule {
    pub fn targets(&self, input: &EvaluationInput) -> bool {
        self.principal.matches(&input.spiffe_id)
            && self.action == input.action
            && resource_matches(&self.resource, &input.resource)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PolicyDocument {
    version: String,
    rules: Vec<Rule>,
}

#[derive(Deserialize)]
struct RawDocument {
    version: String,
    #[serde(default)]
    rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid policy at line {line}, column {column}: {message}")]
    Schema {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate rule id {0:?}")]
    DuplicateRuleId(String),
    #[error("rule {0:?}: timestamp_between start is after end")]
    InvertedRange(String),
}

impl PolicyDocument {
    pub fn new(version: impl Into<String>, rules: Vec<Rule>) -> Result<Self, PolicyError> {
        let mut seen = HashSet::new();
        for rule in &rules {
            if !seen.insert(rule.id.as_str()) {
                return Err(PolicyError::DuplicateRuleId(rule.id.clone()));
            }
            for c in &rule.conditions {
                if let Condition::TimestampBetween { start, end } = c {
                    if start > end {
                        return Err(PolicyError::InvertedRange(rule.id.clone()));
                    }
                }
            }
        }
        Ok(Self {
            version: version.into(),
            rules,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }
}

pub fn load_policy(document: &str) -> Result<PolicyDocument, PolicyError> {
    let raw: RawDocument = serde_json::from_str(document).map_err(|e| {
        let (line, column, message) = (e.line(), e.column(), e.to_string());
        if e.is_data() {
            PolicyError::Schema {
                line,
                column,
                message,
            }
        } else {
            PolicyError::Syntax {
                line,
                column,
                message,
            }
        }
    })?;
    PolicyDocument::new(raw.version, raw.rules)
}

/// Everything a policy may look at for one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvaluationInput {
    pub spiffe_id: SpiffeId,
    pub action: String,
    pub resource: String,
    pub clock_time: ClockTime,
    pub timestamp: DateTime<Utc>,
    pub justification: Option<ResolvedJustification>,
    pub context: BTreeMap<String, Scalar>,
    pub signals: SignalSnapshot,
}

impl EvaluationInput {
    /// Input at `timestamp` with `clock_time` derived from it and no
    /// justification, context or signals.
    pub fn new(
        spiffe_id: SpiffeId,
        action: impl Into<String>,
        resource: impl Into<String>,
        timestamp: DateTime<Utc>,
    ) -> Self {
        Self {
            spiffe_id,
            action: action.into(),
            resource: resource.into(),
            clock_time: ClockTime::of(&timestamp),
            timestamp,
            justification: None,
            context: BTreeMap::new(),
            signals: SignalSnapshot::empty(timestamp),
        }
    }

    pub fn with_justification(mut self, j: ResolvedJustification) -> Self {
        self.justification = Some(j);
        self
    }

    pub fn with_context(mut self, key: impl Into<String>, value: Scalar) -> Self {
        self.context.insert(key.into(), value);
        self
    }

    pub fn with_signals(mut self, signals: SignalSnapshot) -> Self {
        self.signals = signals;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConditionResult {
    pub rule_id: String,
    pub condition: String,
    pub outcome: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decision {
    pub allow: bool,
    pub matched_rule: Option<String>,
    pub condition_results: Vec<ConditionResult>,
    pub denial_reason: Option<String>,
}

fn check(condition: &Condition, input: &EvaluationInput) -> (bool, String) {
    let missing = |what: &str| (false, format!("{what} missing"));
    match condition {
        Condition::ContextEquals { path, value } => match input.context.get(path) {
            Some(Scalar::Text(s)) => (s == value, format!("{path} is {s:?}")),
            Some(other) => (false, format!("{path} is {other}, not text")),
            None => missing(path),
        },
        Condition::ContextBoolIs { path, expected } => match input.context.get(path) {
            Some(Scalar::Bool(b)) => (b == expected, format!("{path} is {b}")),
            Some(other) => (false, format!("{path} is {other}, not boolean")),
            None => missing(path),
        },
        Condition::JustificationStatusIs { status } => match &input.justification {
            Some(j) => (
                j.effective_status == *status,
                format!("justification status is {}", j.effective_status),
            ),
            None => missing("justification"),
        },
        Condition::JustificationRefIs { token_id } => match &input.justification {
            Some(j) => (
                &j.token_id == token_id,
                format!("justification is {:?}", j.token_id),
            ),
            None => missing("justification"),
        },
        Condition::TokenValidNow => match &input.justification {
            Some(j) => (
                j.valid && input.timestamp < j.expires,
                format!(
                    "token {:?} is {}, expires {}",
                    j.token_id,
                    j.effective_status,
                    render_instant(&j.expires)
                ),
            ),
            None => missing("justification"),
        },
        Condition::DailyWindow { start, end } => (
            input.clock_time.within(*start, *end),
            format!("time is {}", input.clock_time),
        ),
        Condition::TimestampBetween { start, end } => (
            *start <= input.timestamp && input.timestamp <= *end,
            format!("timestamp is {}", render_instant(&input.timestamp)),
        ),
        Condition::SlaStateIs { service, state } => {
            let actual = input.signals.sla_state(service);
            (actual == *state, format!("{service} SLA is {actual}"))
        }
        Condition::NoActiveAlert { environment } => {
            let active = input.signals.alert_active(environment);
            (
                !active,
                format!(
                    "alert on {environment} is {}",
                    if active { "active" } else { "clear" }
                ),
            )
        }
    }
}

pub fn evaluate(doc: &PolicyDocument, input: &EvaluationInput) -> Decision {
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for rule in doc.rules.iter().filter(|r| r.targets(input)) {
        let mut satisfied = true;
        for condition in &rule.conditions {
            let (outcome, detail) = check(condition, input);
            if !outcome {
                satisfied = false;
                failures.push(format!("rule {}: {condition} failed ({detail})", rule.id));
            }
            results.push(ConditionResult {
                rule_id: rule.id.clone(),
                condition: condition.to_string(),
                outcome,
                detail,
            });
        }
        if satisfied {
            return Decision {
                allow: true,
                matched_rule: Some(rule.id.clone()),
                condition_results: results,
                denial_reason: None,
            };
        }
    }
    let reason = if results.is_empty() && failures.is_empty() {
        format!(
            "no rule matched {} {} {}",
            input.spiffe_id, input.action, input.resource
        )
    } else {
        failures.join("; ")
    };
    Decision {
        allow: false,
        matched_rule: None,
        condition_results: results,
        denial_reason: Some(reason),
    }
}

pub fn explain(decision: &Decision) -> String {
    let mut out = String::new();
    let verdict = if decision.allow { "allow" } else { "deny" };
    let _ = writeln!(out, "decision: {verdict}");
    if let Some(rule) = &decision.matched_rule {
        let _ = writeln!(out, "matched rule: {rule}");
    }
    if let Some(reason) = &decision.denial_reason {
        let _ = writeln!(out, "reason: {reason}");
    }
    for r in &decision.condition_results {
        let mark = if r.outcome { "pass" } else { "FAIL" };
        let _ = writeln!(out, "  [{mark}] {}: {} ({})", r.rule_id, r.condition, r.detail);
    }
    out
}
