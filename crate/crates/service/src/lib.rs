//! HTTP/JSON front end for the broker.
//!
//! Handlers translate JSON bodies into broker calls and broker outcomes into
//! responses. Every authorization decision returned here carries the `audit_seq`
//! of the record the broker wrote for it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use intent_broker_core::audit::{AuditFilter, AuditLog, FileSink, Verdict};
use intent_broker_core::broker::{
    flatten_context, AccessRequest, Broker, BrokerConfigFile, Clock, ConfigError, Denial,
    DenialStage, Grant, Lease, LogicalClock, RenewOptions, SystemClock,
};
use intent_broker_core::identity::{BundleError, TrustBundle};
use intent_broker_core::issuers::{load_bindings, IssuerError};
use intent_broker_core::justification::{ApprovalStatus, JustificationError, JustificationToken};
use intent_broker_core::policy::{load_policy, PolicyError};

/// Header carrying the logical time of a request in deterministic-clock mode.
pub const CLOCK_HEADER: &str = "x-clock";

#[derive(Debug, Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("policy {path}: {source}")]
    Policy { path: PathBuf, source: PolicyError },
    #[error("trust bundle {path}: {source}")]
    Bundle { path: PathBuf, source: BundleError },
    #[error("bindings {path}: {source}")]
    Bindings { path: PathBuf, source: IssuerError },
    #[error("audit log {path} already holds records; refusing to overwrite it")]
    AuditExists { path: PathBuf },
    #[error("audit log {path}: {source}")]
    Audit {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn read(path: &Path) -> Result<String, StartupError> {
    std::fs::read_to_string(path).map_err(|source| StartupError::Read {
        path: path.to_owned(),
        source,
    })
}

#[derive(Clone)]
pub struct AppState {
    broker: Arc<Broker>,
    policy_path: PathBuf,
    clock: Arc<dyn Clock>,
    logical: Option<Arc<LogicalClock>>,
}

impl AppState {
    /// Loads policy, bundle, bindings and (optionally) the audit file named
    /// by `config`. Any failure is fatal.
    pub fn from_config(config: &BrokerConfigFile, deterministic_clock: bool) -> Result<Self, StartupError> {
        let broker_config = config.broker_config()?;
        let policy = load_policy(&read(&config.policy_path)?).map_err(|source| StartupError::Policy {
            path: config.policy_path.clone(),
            source,
        })?;
        let bundle = TrustBundle::from_json(&read(&config.bundle_path)?).map_err(|source| {
            StartupError::Bundle {
                path: config.bundle_path.clone(),
                source,
            }
        })?;
        let bindings = match &config.bindings_path {
            Some(path) => load_bindings(&read(path)?).map_err(|source| StartupError::Bindings {
                path: path.clone(),
                source,
            })?,
            None => Vec::new(),
        };
        let mut builder = Broker::builder(broker_config, policy, bundle).bindings(bindings);
        if let Some(path) = &config.audit_path {
            if std::fs::metadata(path).is_ok_and(|m| m.len() > 0) {
                return Err(StartupError::AuditExists { path: path.clone() });
            }
            let sink = FileSink::create(path).map_err(|source| StartupError::Audit {
                path: path.clone(),
                source,
            })?;
            builder = builder.audit(Arc::new(AuditLog::new(Box::new(sink))));
        }
        Ok(Self::new(Arc::new(builder.build()), config.policy_path.clone(), deterministic_clock))
    }

    pub fn new(broker: Arc<Broker>, policy_path: PathBuf, deterministic_clock: bool) -> Self {
        let logical = deterministic_clock.then(|| Arc::new(LogicalClock::new(SystemClock.now())));
        let clock: Arc<dyn Clock> = match &logical {
            Some(l) => l.clone(),
            None => Arc::new(SystemClock),
        };
        Self {
            broker,
            policy_path,
            clock,
            logical,
        }
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    /// Request time: the `X-Clock` header in deterministic mode (remembered
    /// for later requests without one), the system clock otherwise.
    fn now(&self, headers: &HeaderMap) -> Result<DateTime<Utc>, ApiError> {
        if let (Some(logical), Some(value)) = (&self.logical, headers.get(CLOCK_HEADER)) {
            let t = value
                .to_str()
                .ok()
                .and_then(|s| DateTime::parse_from_rfc3339(s).ok())
                .ok_or_else(|| ApiError::bad_request(format!("{CLOCK_HEADER} must be an RFC 3339 instant")))?
                .with_timezone(&Utc);
            logical.set(t);
            return Ok(t);
        }
        Ok(self.clock.now())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    IdentityError,
    JustificationError,
    PolicyDeny,
    IssuerError,
    NotFound,
    BadRequest,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_seq: Option<u64>,
    #[serde(skip)]
    status: Option<u16>,
}

impl ApiError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            audit_seq: None,
            status: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }

    fn with_status(mut self, status: StatusCode) -> Self {
        self.status = Some(status.as_u16());
        self
    }

    pub fn status(&self) -> StatusCode {
        if let Some(s) = self.status.and_then(|s| StatusCode::from_u16(s).ok()) {
            return s;
        }
        match self.code {
            ErrorCode::IdentityError => StatusCode::UNAUTHORIZED,
            ErrorCode::JustificationError | ErrorCode::PolicyDeny => StatusCode::FORBIDDEN,
            ErrorCode::IssuerError | ErrorCode::Internal => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::BadRequest => StatusCode::BAD_REQUEST,
        }
    }
}

impl From<Denial> for ApiError {
    fn from(d: Denial) -> Self {
        let code = match d.stage {
            DenialStage::Identity => ErrorCode::IdentityError,
            DenialStage::Justification => ErrorCode::JustificationError,
            DenialStage::Policy => ErrorCode::PolicyDeny,
            DenialStage::Issuer => ErrorCode::IssuerError,
            DenialStage::NotFound => ErrorCode::NotFound,
            DenialStage::Internal => ErrorCode::Internal,
        };
        let mut e = Self::new(code, d.message);
        e.audit_seq = d.audit_seq;
        if d.unavailable {
            e = e.with_status(StatusCode::SERVICE_UNAVAILABLE);
        }
        e
    }
}

impl From<JustificationError> for ApiError {
    fn from(e: JustificationError) -> Self {
        let message = e.to_string();
        match e {
            JustificationError::Unavailable => {
                Self::new(ErrorCode::JustificationError, message).with_status(StatusCode::SERVICE_UNAVAILABLE)
            }
            JustificationError::UnknownToken(_) => Self::new(ErrorCode::NotFound, message),
            JustificationError::Conflict(_) => Self::bad_request(message).with_status(StatusCode::CONFLICT),
            _ => Self::bad_request(message),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
pub struct CredentialsBody {
    pub workload_token: String,
    pub action: String,
    pub resource: String,
    #[serde(default)]
    pub justification_ref: Option<String>,
    #[serde(default)]
    pub context: Option<serde_json::Value>,
}

#[derive(Debug, Default, Deserialize)]
pub struct RenewBody {
    #[serde(default)]
    pub workload_token: Option<String>,
    #[serde(default)]
    pub justification_ref: Option<String>,
}

/// Successful issuance or renewal. The only response that carries secret
/// material.
#[derive(Debug, Serialize)]
pub struct GrantResponse {
    pub lease: Lease,
    pub matched_rule: Option<String>,
    pub audit_seq: u64,
}

impl From<Grant> for GrantResponse {
    fn from(g: Grant) -> Self {
        Self {
            lease: g.lease,
            matched_rule: g.decision.matched_rule,
            audit_seq: g.audit_seq,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct StatusBody {
    pub status: ApprovalStatus,
}

#[derive(Debug, Deserialize)]
pub struct SlaBody {
    pub service: String,
    pub state: String,
}

#[derive(Debug, Deserialize)]
pub struct AlertBody {
    pub environment: String,
    pub active: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct AuditQuery {
    pub spiffe_id: Option<String>,
    pub decision: Option<Verdict>,
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

async fn credentials(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<CredentialsBody>, JsonRejection>,
) -> ApiResult<GrantResponse> {
    let now = state.now(&headers)?;
    let Json(body) = body?;
    let context = match &body.context {
        Some(v) => flatten_context(v).map_err(|e| ApiError::bad_request(e.to_string()))?,
        None => Default::default(),
    };
    let request = AccessRequest {
        workload_token: body.workload_token,
        action: body.action,
        resource: body.resource,
        justification_ref: body.justification_ref,
        context,
    };
    Ok(Json(state.broker.request_credentials(&request, now)?.into()))
}

async fn renew(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Option<Json<RenewBody>>,
) -> ApiResult<GrantResponse> {
    let now = state.now(&headers)?;
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let options = RenewOptions {
        workload_token: body.workload_token,
        justification_ref: body.justification_ref,
    };
    Ok(Json(state.broker.renew_lease(&id, &options, now)?.into()))
}

async fn lease(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let now = state.now(&headers)?;
    let lease = state
        .broker
        .get_lease(&id)
        .ok_or_else(|| ApiError::new(ErrorCode::NotFound, format!("unknown lease {id:?}")))?;
    Ok(Json(lease.summary(now)).into_response())
}

async fn register_approval(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<JustificationToken>, JsonRejection>,
) -> Result<Response, ApiError> {
    let now = state.now(&headers)?;
    let Json(token) = body?;
    let id = state.broker.registry().register_approval(token, now)?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "token_id": id }))).into_response())
}

async fn set_approval_status(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Result<Json<StatusBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let now = state.now(&headers)?;
    let Json(body) = body?;
    let record = state.broker.registry().set_status(&id, body.status, now)?;
    Ok(Json(record).into_response())
}

async fn set_sla(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<SlaBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let now = state.now(&headers)?;
    let Json(body) = body?;
    let record = state
        .broker
        .signals()
        .set_sla(&body.service, &body.state, now)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(record).into_response())
}

async fn set_alert(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<AlertBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let now = state.now(&headers)?;
    let Json(body) = body?;
    let signals = state.broker.signals();
    let record = if body.active {
        signals.raise_alert(&body.environment, now)
    } else {
        signals.clear_alert(&body.environment, now)
    };
    Ok(Json(record).into_response())
}

async fn audit(
    State(state): State<AppState>,
    query: Result<Query<AuditQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query?;
    let filter = AuditFilter {
        spiffe_id: q.spiffe_id,
        decision: q.decision,
        from: q.from,
        to: q.to,
    };
    Ok(Json(state.broker.audit().query(&filter)).into_response())
}

async fn reload_policy(State(state): State<AppState>) -> Result<Response, ApiError> {
    let text = std::fs::read_to_string(&state.policy_path)
        .map_err(|e| ApiError::bad_request(format!("{}: {e}", state.policy_path.display())))?;
    let version = state
        .broker
        .reload_policy(&text)
        .map_err(|e| ApiError::bad_request(format!("policy rejected, previous version kept: {e}")))?;
    tracing::info!(%version, "policy reloaded");
    Ok(Json(serde_json::json!({ "policy_version": version })).into_response())
}

async fn healthz(State(state): State<AppState>) -> Response {
    Json(serde_json::json!({
        "status": "ok",
        "policy_version": state.broker.policy_version(),
        "bundle_domains": state.broker.bundle_domains(),
    }))
    .into_response()
}

async fn fallback() -> ApiError {
    ApiError::new(ErrorCode::NotFound, "no such route")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/credentials", post(credentials))
        .route("/v1/leases/{id}/renew", post(renew))
        .route("/v1/leases/{id}", get(lease))
        .route("/v1/approvals", post(register_approval))
        .route("/v1/approvals/{id}", patch(set_approval_status))
        .route("/v1/signals/sla", post(set_sla))
        .route("/v1/signals/alerts", post(set_alert))
        .route("/v1/audit", get(audit))
        .route("/v1/policy/reload", post(reload_policy))
        .route("/v1/healthz", get(healthz))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
