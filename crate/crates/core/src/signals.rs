//! Runtime signals (SLA state, security alerts) fed back into evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlaLevel {
    Normal,
    Stable,
    Critical,
}

impl SlaLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::Stable => "stable",
            Self::Critical => "critical",
        }
    }
}

impl fmt::Display for SlaLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown SLA state {0:?} (expected normal, stable or critical)")]
pub struct UnknownSlaState(pub String);

impl FromStr for SlaLevel {
    type Err = UnknownSlaState;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Self::Normal),
            "stable" => Ok(Self::Stable),
            "critical" => Ok(Self::Critical),
            other => Err(UnknownSlaState(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SlaState {
    pub service: String,
    pub state: SlaLevel,
    pub since: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SecurityAlert {
    pub environment: String,
    pub active: bool,
    pub raised_at: DateTime<Utc>,
}

/// Point-in-time copy of the store. Services that were never set read as
/// [`SlaLevel::Normal`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SignalSnapshot {
    pub sla: BTreeMap<String, SlaLevel>,
    pub alerts: BTreeSet<String>,
    pub taken_at: DateTime<Utc>,
}

impl SignalSnapshot {
    pub fn empty(taken_at: DateTime<Utc>) -> Self {
        Self {
            sla: BTreeMap::new(),
            alerts: BTreeSet::new(),
            taken_at,
        }
    }

    pub fn sla_state(&self, service: &str) -> SlaLevel {
        self.sla.get(service).copied().unwrap_or(SlaLevel::Normal)
    }

    pub fn alert_active(&self, environment: &str) -> bool {
        self.alerts.contains(environment)
    }
}

#[derive(Debug, Default)]
struct State {
    sla: BTreeMap<String, SlaState>,
    alerts: BTreeMap<String, SecurityAlert>,
}

#[derive(Debug, Default)]
pub struct SignalStore {
    state: RwLock<State>,
}

impl SignalStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_sla(
        &self,
        service: &str,
        state: &str,
        now: DateTime<Utc>,
    ) -> Result<SlaState, UnknownSlaState> {
        let level: SlaLevel = state.parse()?;
        let record = SlaState {
            service: service.to_owned(),
            state: level,
            since: now,
        };
        self.state
            .write()
            .sla
            .insert(service.to_owned(), record.clone());
        Ok(record)
    }

    pub fn raise_alert(&self, environment: &str, now: DateTime<Utc>) -> SecurityAlert {
        let mut state = self.state.write();
        let entry = state
            .alerts
            .entry(environment.to_owned())
            .or_insert_with(|| SecurityAlert {
                environment: environment.to_owned(),
                active: false,
                raised_at: now,
            });
        if !entry.active {
            entry.active = true;
            entry.raised_at = now;
        }
        entry.clone()
    }

    pub fn clear_alert(&self, environment: &str, now: DateTime<Utc>) -> SecurityAlert {
        let mut state = self.state.write();
        match state.alerts.get_mut(environment) {
            Some(entry) => {
                entry.active = false;
                entry.clone()
            }
            None => SecurityAlert {
                environment: environment.to_owned(),
                active: false,
                raised_at: now,
            },
        }
    }

    pub fn snapshot(&self, now: DateTime<Utc>) -> SignalSnapshot {
        let state = self.state.read();
        SignalSnapshot {
            sla: state
                .sla
                .iter()
                .map(|(k, v)| (k.clone(), v.state))
                .collect(),
            alerts: state
                .alerts
                .values()
                .filter(|a| a.active)
                .map(|a| a.environment.clone())
                .collect(),
            taken_at: now,
        }
    }
}
