//! Blocking HTTP client for a running broker service, used by the one-shot
//! subcommands and by `replay --addr`.

use anyhow::{anyhow, Context, Result};
use chrono::{DateTime, Utc};
use reqwest::blocking::{Client as Http, RequestBuilder, Response};
use reqwest::Method;
use serde_json::{json, Value};

use intent_broker_core::audit::Verdict;
use intent_broker_core::broker::{AccessRequest, LeaseSummary, RenewOptions};
use intent_broker_core::harness::{AttemptOutcome, ReplayTarget};
use intent_broker_core::identity::VerifyingKey;
use intent_broker_core::justification::{ApprovalStatus, JustificationToken};
use intent_broker_core::policy::Scalar;
use intent_broker_core::render_instant;

pub struct Client {
    base: String,
    http: Http,
}

/// Reply from the service: HTTP status and JSON body.
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

impl Reply {
    pub fn ok(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// `"code: message"` for an error body.
    pub fn error_text(&self) -> String {
        format!(
            "{}: {}",
            self.body["code"].as_str().unwrap_or("error"),
            self.body["message"].as_str().unwrap_or("")
        )
    }
}

impl Client {
    pub fn new(addr: &str) -> Result<Self> {
        let base = if addr.starts_with("http://") || addr.starts_with("https://") {
            addr.trim_end_matches('/').to_owned()
        } else {
            format!("http://{}", addr.trim_end_matches('/'))
        };
        let http = Http::builder().build().context("building HTTP client")?;
        Ok(Self { base, http })
    }

    pub fn call(&self, method: Method, path: &str, clock: Option<DateTime<Utc>>, body: Option<Value>) -> Result<Reply> {
        let mut req: RequestBuilder = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = clock {
            req = req.header("x-clock", render_instant(&t));
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp: Response = req
            .send()
            .with_context(|| format!("cannot reach broker at {}", self.base))?;
        let status = resp.status().as_u16();
        let text = resp.text().context("reading response body")?;
        let body = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        Ok(Reply { status, body })
    }
}

fn scalar_json(s: &Scalar) -> Value {
    match s {
        Scalar::Bool(b) => json!(b),
        Scalar::Number(n) => json!(n),
        Scalar::Text(t) => json!(t),
    }
}

fn attempt(reply: Reply) -> Result<AttemptOutcome> {
    if reply.ok() {
        let lease_id = reply.body["lease"]["lease_id"]
            .as_str()
            .ok_or_else(|| anyhow!("grant response without lease id: {}", reply.body))?;
        return Ok(AttemptOutcome {
            decision: Verdict::Allow,
            reason: format!(
                "allowed by rule {}",
                reply.body["matched_rule"].as_str().unwrap_or("?")
            ),
            lease_id: Some(lease_id.to_owned()),
            audit_seq: reply.body["audit_seq"].as_u64(),
        });
    }
    if reply.body["code"] == "bad_request" || reply.body.get("code").is_none() {
        return Err(anyhow!("service rejected the request ({}): {}", reply.status, reply.body));
    }
    Ok(AttemptOutcome {
        decision: Verdict::Deny,
        reason: reply.error_text(),
        lease_id: None,
        audit_seq: reply.body["audit_seq"].as_u64(),
    })
}

fn expect_ok(reply: Reply) -> Result<Value, String> {
    if reply.ok() {
        Ok(reply.body)
    } else {
        Err(reply.error_text())
    }
}

impl ReplayTarget for Client {
    fn register_approval(&mut self, token: JustificationToken, now: DateTime<Utc>) -> Result<(), String> {
        let body = serde_json::to_value(token).map_err(|e| e.to_string())?;
        let reply = self.call(Method::POST, "/v1/approvals", Some(now), Some(body)).map_err(|e| format!("{e:#}"))?;
        expect_ok(reply).map(drop)
    }

    fn set_status(&mut self, token_id: &str, status: ApprovalStatus, now: DateTime<Utc>) -> Result<(), String> {
        let reply = self
            .call(Method::PATCH, &format!("/v1/approvals/{token_id}"), Some(now), Some(json!({ "status": status })))
            .map_err(|e| format!("{e:#}"))?;
        expect_ok(reply).map(drop)
    }

    fn set_sla(&mut self, service: &str, state: &str, now: DateTime<Utc>) -> Result<(), String> {
        let reply = self
            .call(Method::POST, "/v1/signals/sla", Some(now), Some(json!({ "service": service, "state": state })))
            .map_err(|e| format!("{e:#}"))?;
        expect_ok(reply).map(drop)
    }

    fn set_alert(&mut self, environment: &str, active: bool, now: DateTime<Utc>) -> Result<(), String> {
        let reply = self
            .call(
                Method::POST,
                "/v1/signals/alerts",
                Some(now),
                Some(json!({ "environment": environment, "active": active })),
            )
            .map_err(|e| format!("{e:#}"))?;
        expect_ok(reply).map(drop)
    }

    fn set_registry_available(&mut self, _available: bool) -> Result<(), String> {
        Err("registry outages cannot be injected into a live service".into())
    }

    fn trust_key(&mut self, _trust_domain: &str, _key_id: &str, _key: VerifyingKey) -> Result<(), String> {
        Err("trust bundles of a live service are fixed at startup".into())
    }

    fn request(&mut self, request: &AccessRequest, now: DateTime<Utc>) -> Result<AttemptOutcome, String> {
        let context: serde_json::Map<String, Value> = request
            .context
            .iter()
            .map(|(k, v)| (k.clone(), scalar_json(v)))
            .collect();
        let body = json!({
            "workload_token": request.workload_token,
            "action": request.action,
            "resource": request.resource,
            "justification_ref": request.justification_ref,
            "context": context,
        });
        self.call(Method::POST, "/v1/credentials", Some(now), Some(body))
            .and_then(attempt)
            .map_err(|e| format!("{e:#}"))
    }

    fn renew(&mut self, lease_id: &str, options: &RenewOptions, now: DateTime<Utc>) -> Result<AttemptOutcome, String> {
        let body = json!({
            "workload_token": options.workload_token,
            "justification_ref": options.justification_ref,
        });
        self.call(Method::POST, &format!("/v1/leases/{lease_id}/renew"), Some(now), Some(body))
            .and_then(attempt)
            .map_err(|e| format!("{e:#}"))
    }

    fn lease(&mut self, lease_id: &str, now: DateTime<Utc>) -> Result<LeaseSummary, String> {
        let reply = self
            .call(Method::GET, &format!("/v1/leases/{lease_id}"), Some(now), None)
            .map_err(|e| format!("{e:#}"))?;
        serde_json::from_value(expect_ok(reply)?).map_err(|e| e.to_string())
    }
}
