mod live;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use reqwest::Method;
use serde_json::{json, Value};

use intent_broker_core::audit::{read_log, verify_chain};
use intent_broker_core::broker::{BrokerConfigFile, DEFAULT_BROKER_NAME, DEFAULT_TTL_SECONDS};
use intent_broker_core::harness::{
    replay_key, run_scenario, InProcessTarget, LoadedScenario, ReplayTarget,
};
use intent_broker_core::identity::{mint_workload_token, SpiffeId, TrustBundle, TrustDomain};
use intent_broker_core::justification::{ApprovalStatus, JustificationToken, APPROVALS_DOMAIN};
use intent_broker_service::AppState;

use crate::live::Client;

const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[derive(Parser)]
#[command(name = "intent-broker", version, about = "Intent-aware credential broker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Replay scenario files and report mismatches.
    Replay(ReplayArgs),
    /// Ask a running service for credentials.
    Request(RequestArgs),
    /// Renew a lease on a running service.
    Renew(RenewArgs),
    /// Register an approval or change its status.
    Approve(ApproveArgs),
    /// Publish an SLA state or security alert.
    Signal(SignalArgs),
    /// Query the audit log of a running service.
    Audit(AuditArgs),
    /// Verify the hash chain of an audit log file.
    VerifyAudit { file: PathBuf },
    /// Development helpers using the deterministic replay keys.
    #[command(subcommand)]
    Dev(DevCommand),
}

#[derive(Args)]
struct ServeArgs {
    /// Broker config file; replaces the individual path flags.
    #[arg(long, conflicts_with_all = ["policy", "bundle", "bindings", "audit", "trust_domain", "ttl", "name"])]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    policy: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    bundle: Option<PathBuf>,
    #[arg(long)]
    bindings: Option<PathBuf>,
    /// Append-only audit file (NDJSON); must not already hold records.
    #[arg(long)]
    audit: Option<PathBuf>,
    #[arg(long, default_value = "ci")]
    trust_domain: Option<String>,
    #[arg(long)]
    ttl: Option<i64>,
    /// Broker name; workload tokens must carry it as their audience.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = DEFAULT_ADDR)]
    addr: String,
    /// Take request time from the X-Clock header.
    #[arg(long)]
    deterministic_clock: bool,
}

#[derive(Args)]
struct ReplayArgs {
    scenarios: Vec<PathBuf>,
    #[arg(long = "scenario")]
    extra: Vec<PathBuf>,
    /// Write the trace here instead of stdout.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Replay against a running service (started with --deterministic-clock).
    #[arg(long)]
    addr: Option<String>,
}

#[derive(Args)]
struct Remote {
    #[arg(long, default_value = DEFAULT_ADDR)]
    addr: String,
    /// Logical request time, honored by services in deterministic-clock mode.
    #[arg(long)]
    clock: Option<DateTime<Utc>>,
}

#[derive(Args)]
struct TokenSource {
    /// Transport-encoded workload token.
    #[arg(long, conflicts_with = "token_file")]
    token: Option<String>,
    #[arg(long)]
    token_file: Option<PathBuf>,
}

impl TokenSource {
    fn read(&self) -> Result<Option<String>> {
        match (&self.token, &self.token_file) {
            (Some(t), _) => Ok(Some(t.trim().to_owned())),
            (None, Some(p)) => Ok(Some(
                std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .trim()
                    .to_owned(),
            )),
            (None, None) => Ok(None),
        }
    }
}

#[derive(Args)]
struct RequestArgs {
    #[command(flatten)]
    remote: Remote,
    #[command(flatten)]
    token: TokenSource,
    #[arg(long)]
    action: String,
    #[arg(long)]
    resource: String,
    #[arg(long)]
    justification_ref: Option<String>,
    /// JSON object of request context.
    #[arg(long)]
    context: Option<String>,
}

#[derive(Args)]
struct RenewArgs {
    #[command(flatten)]
    remote: Remote,
    #[command(flatten)]
    token: TokenSource,
    lease_id: String,
    #[arg(long)]
    justification_ref: Option<String>,
}

#[derive(Args)]
struct ApproveArgs {
    #[command(flatten)]
    remote: Remote,
    /// Signed approval token (JSON) to register.
    #[arg(long, conflicts_with_all = ["id", "status"], required_unless_present = "id")]
    file: Option<PathBuf>,
    /// Token id whose status to change.
    #[arg(long, requires = "status")]
    id: Option<String>,
    #[arg(long)]
    status: Option<ApprovalStatus>,
}

#[derive(Args)]
struct SignalArgs {
    #[command(flatten)]
    remote: Remote,
    #[command(subcommand)]
    kind: SignalKind,
}

#[derive(Subcommand)]
enum SignalKind {
    Sla {
        #[arg(long)]
        service: String,
        #[arg(long)]
        state: String,
    },
    Alert {
        #[arg(long)]
        environment: String,
        #[arg(long, conflicts_with = "clear", required_unless_present = "clear")]
        raise: bool,
        #[arg(long)]
        clear: bool,
    },
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    remote: Remote,
    #[arg(long)]
    spiffe_id: Option<String>,
    #[arg(long, value_parser = ["allow", "deny"])]
    decision: Option<String>,
    #[arg(long)]
    from: Option<DateTime<Utc>>,
    #[arg(long)]
    to: Option<DateTime<Utc>>,
}

#[derive(Subcommand)]
enum DevCommand {
    /// Mint a workload token signed with the replay key for its trust domain.
    MintToken {
        #[arg(long)]
        spiffe_id: SpiffeId,
        #[arg(long)]
        key_id: String,
        #[arg(long, default_value_t = DEFAULT_TTL_SECONDS)]
        ttl: i64,
        #[arg(long, default_value = DEFAULT_BROKER_NAME)]
        audience: String,
        /// Issue time; defaults to now.
        #[arg(long)]
        at: Option<DateTime<Utc>>,
        /// Selector as key=value; repeatable.
        #[arg(long = "selector", value_parser = parse_selector)]
        selectors: Vec<(String, String)>,
    },
    /// Sign an approval token with a replay approval key.
    SignApproval {
        #[arg(long)]
        token_id: String,
        #[arg(long, default_value = "approved")]
        status: ApprovalStatus,
        #[arg(long)]
        approver: String,
        #[arg(long)]
        issued_at: DateTime<Utc>,
        #[arg(long)]
        expires: DateTime<Utc>,
        #[arg(long, default_value = "")]
        reason: String,
        #[arg(long, default_value = "manual")]
        source: String,
        #[arg(long)]
        key_id: String,
    },
    /// Print a trust bundle of replay keys, from `td:key_id` pairs or a
    /// scenario's trust list.
    Bundle {
        #[arg(long = "key", value_parser = parse_key_ref)]
        keys: Vec<(String, String)>,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

fn parse_selector(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn parse_key_ref(s: &str) -> Result<(String, String), String> {
    s.split_once(':')
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected trust_domain:key_id, got {s:?}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Serve(args) => serve(args),
        Command::Replay(args) => replay(args),
        Command::Request(args) => request(args),
        Command::Renew(args) => renew(args),
        Command::Approve(args) => approve(args),
        Command::Signal(args) => signal(args),
        Command::Audit(args) => audit(args),
        Command::VerifyAudit { file } => verify_audit(&file),
        Command::Dev(cmd) => dev(cmd),
    }
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let config = match &args.config {
        Some(path) => BrokerConfigFile::load(path)?,
        None => BrokerConfigFile {
            ttl_seconds: args.ttl.unwrap_or(DEFAULT_TTL_SECONDS),
            policy_path: args.policy.clone().expect("clap enforces --policy"),
            bundle_path: args.bundle.clone().expect("clap enforces --bundle"),
            trust_domain: args.trust_domain.clone().unwrap_or_else(|| "ci".into()),
            bindings_path: args.bindings.clone(),
            name: args.name.clone(),
            audit_path: args.audit.clone(),
        },
    };
    let state = AppState::from_config(&config, args.deterministic_clock).context("startup failed")?;
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        intent_broker_service::serve(listener, state).await.context("serving")
    })?;
    Ok(ExitCode::SUCCESS)
}

fn replay(args: ReplayArgs) -> Result<ExitCode> {
    let files: Vec<PathBuf> = args.scenarios.into_iter().chain(args.extra).collect();
    if files.is_empty() {
        bail!("no scenario given");
    }
    let mut trace = String::new();
    let mut failed = false;
    for path in &files {
        let loaded = LoadedScenario::load(path)?;
        let mut target: Box<dyn ReplayTarget> = match &args.addr {
            Some(addr) => Box::new(Client::new(addr)?),
            None => Box::new(InProcessTarget::new(&loaded)?),
        };
        let report = run_scenario(&loaded, target.as_mut()).with_context(|| path.display().to_string())?;
        trace.push_str(&report.render());
        let mismatches: Vec<usize> = report.mismatches().collect();
        if mismatches.is_empty() {
            eprintln!("pass {} ({} attempts)", report.name, report.attempts());
        } else {
            failed = true;
            eprintln!("FAIL {}: mismatches at events {mismatches:?}", report.name);
        }
    }
    match &args.trace_out {
        Some(out) => std::fs::write(out, &trace).with_context(|| format!("writing {}", out.display()))?,
        None => print!("{trace}"),
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

/// Prints a successful reply; turns an error reply into exit status 1.
fn finish(reply: live::Reply) -> Result<ExitCode> {
    if reply.ok() {
        println!("{}", serde_json::to_string_pretty(&reply.body)?);
        return Ok(ExitCode::SUCCESS);
    }
    let seq = reply.body["audit_seq"]
        .as_u64()
        .map(|s| format!(" (audit_seq {s})"))
        .unwrap_or_default();
    eprintln!("denied [{}]: {}{seq}", reply.status, reply.error_text());
    Ok(ExitCode::FAILURE)
}

fn request(args: RequestArgs) -> Result<ExitCode> {
    let token = args.token.read()?.ok_or_else(|| anyhow!("--token or --token-file is required"))?;
    let context: Value = match &args.context {
        Some(text) => serde_json::from_str(text).context("--context must be a JSON object")?,
        None => json!({}),
    };
    let body = json!({
        "workload_token": token,
        "action": args.action,
        "resource": args.resource,
        "justification_ref": args.justification_ref,
        "context": context,
    });
    let client = Client::new(&args.remote.addr)?;
    finish(client.call(Method::POST, "/v1/credentials", args.remote.clock, Some(body))?)
}

fn renew(args: RenewArgs) -> Result<ExitCode> {
    let body = json!({
        "workload_token": args.token.read()?,
        "justification_ref": args.justification_ref,
    });
    let client = Client::new(&args.remote.addr)?;
    let path = format!("/v1/leases/{}/renew", args.lease_id);
    finish(client.call(Method::POST, &path, args.remote.clock, Some(body))?)
}

fn approve(args: ApproveArgs) -> Result<ExitCode> {
    let client = Client::new(&args.remote.addr)?;
    let reply = match (&args.file, &args.id, args.status) {
        (Some(file), _, _) => {
            let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let token: JustificationToken = serde_json::from_str(&text).context("parsing approval token")?;
            client.call(Method::POST, "/v1/approvals", args.remote.clock, Some(serde_json::to_value(token)?))?
        }
        (None, Some(id), Some(status)) => client.call(
            Method::PATCH,
            &format!("/v1/approvals/{id}"),
            args.remote.clock,
            Some(json!({ "status": status })),
        )?,
        _ => bail!("give --file, or --id with --status"),
    };
    finish(reply)
}

fn signal(args: SignalArgs) -> Result<ExitCode> {
    let client = Client::new(&args.remote.addr)?;
    let (path, body) = match args.kind {
        SignalKind::Sla { service, state } => ("/v1/signals/sla", json!({ "service": service, "state": state })),
        SignalKind::Alert { environment, raise, .. } => {
            ("/v1/signals/alerts", json!({ "environment": environment, "active": raise }))
        }
    };
    finish(client.call(Method::POST, path, args.remote.clock, Some(body))?)
}

fn audit(args: AuditArgs) -> Result<ExitCode> {
    let mut url = reqwest::Url::parse("http://placeholder/v1/audit")?;
    {
        let mut q = url.query_pairs_mut();
        if let Some(s) = &args.spiffe_id {
            q.append_pair("spiffe_id", s);
        }
        if let Some(d) = &args.decision {
            q.append_pair("decision", d);
        }
        if let Some(t) = &args.from {
            q.append_pair("from", &intent_broker_core::render_instant(t));
        }
        if let Some(t) = &args.to {
            q.append_pair("to", &intent_broker_core::render_instant(t));
        }
    }
    let path = match url.query() {
        Some(q) if !q.is_empty() => format!("/v1/audit?{q}"),
        _ => "/v1/audit".to_owned(),
    };
    let client = Client::new(&args.remote.addr)?;
    let reply = client.call(Method::GET, &path, args.remote.clock, None)?;
    if !reply.ok() {
        return finish(reply);
    }
    for record in reply.body.as_array().into_iter().flatten() {
        println!("{record}");
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_audit(file: &Path) -> Result<ExitCode> {
    let records = read_log(file).with_context(|| format!("reading {}", file.display()))?;
    match verify_chain(&records) {
        Ok(()) => {
            println!("ok: {} records, chain intact", records.len());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("tampered: first bad record seq {}: {e}", e.seq());
            Ok(ExitCode::FAILURE)
        }
    }
}

fn dev(cmd: DevCommand) -> Result<ExitCode> {
    match cmd {
        DevCommand::MintToken {
            spiffe_id,
            key_id,
            ttl,
            audience,
            at,
            selectors,
        } => {
            let key = replay_key(spiffe_id.trust_domain().as_str(), &key_id);
            let selectors: BTreeMap<String, String> = selectors.into_iter().collect();
            let token = mint_workload_token(spiffe_id, selectors, &audience, ttl, &key, &key_id, at.unwrap_or_else(Utc::now))?;
            println!("{}", token.encode());
        }
        DevCommand::SignApproval {
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
                token_id,
                status,
                approver,
                issued_at,
                expires,
                reason,
                source,
                key_id: String::new(),
                signature: Vec::new(),
            }
            .signed(&replay_key(APPROVALS_DOMAIN, &key_id), &key_id);
            println!("{}", serde_json::to_string_pretty(&token)?);
        }
        DevCommand::Bundle { keys, scenario } => {
            let mut refs = keys;
            if let Some(path) = scenario {
                let loaded = LoadedScenario::load(&path)?;
                refs.extend(loaded.scenario.trust.iter().map(|k| (k.trust_domain.clone(), k.key_id.clone())));
            }
            if refs.is_empty() {
                bail!("give --key td:key_id or --scenario");
            }
            let mut bundle = TrustBundle::new();
            for (td, key_id) in refs {
                let domain = TrustDomain::new(&td)?;
                bundle.add_key(domain, &key_id, replay_key(&td, &key_id).verifying_key())?;
            }
            println!("{}", bundle.to_json());
        }
    }
    Ok(ExitCode::SUCCESS)
}
