//! Append-only, hash-chained decision log.
//!
//! Each record carries the SHA-256 of its predecessor; record 0 links to the
//! all-zero digest. On disk the log is newline-delimited JSON: one header
//! line naming the digest, then one record per line.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wire::FieldWriter;

pub const DIGEST_ALGORITHM: &str = "sha256";
pub const LOG_FORMAT: &str = "intent-broker-audit/1";
pub const ZERO_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Allow,
    Deny,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Allow => "allow",
            Self::Deny => "deny",
        }
    }
}

/// Fields supplied by the caller; sequencing and hashing are the log's job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub spiffe_id: Option<String>,
    pub action: String,
    pub resource: String,
    pub decision: Verdict,
    pub reason: String,
    pub rule_id: Option<String>,
    pub lease_id: Option<String>,
    pub justification_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    /// `"unverified"` when identity verification failed.
    pub spiffe_id: String,
    pub action: String,
    pub resource: String,
    pub decision: Verdict,
    pub reason: String,
    pub rule_id: Option<String>,
    pub lease_id: Option<String>,
    pub justification_ref: Option<String>,
    pub prev_hash: String,
    pub hash: String,
}

impl AuditRecord {
    pub fn compute_hash(&self) -> String {
        let mut w = FieldWriter::default();
        w.text(&self.seq.to_string());
        w.instant(&self.timestamp);
        w.text(&self.spiffe_id);
        w.text(&self.action);
        w.text(&self.resource);
        w.text(self.decision.as_str());
        w.text(&self.reason);
        w.opt_text(self.rule_id.as_deref());
        w.opt_text(self.lease_id.as_deref());
        w.opt_text(self.justification_ref.as_deref());
        w.text(&self.prev_hash);
        Sha256::digest(w.finish())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Durable destination for records. A failed `persist` aborts the append.
pub trait AuditSink: Send {
    fn persist(&mut self, record: &AuditRecord) -> io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemorySink;

impl AuditSink for MemorySink {
    fn persist(&mut self, _record: &AuditRecord) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    digest: String,
}

#[derive(Debug)]
pub struct FileSink {
    file: File,
}

impl FileSink {
    /// Creates (truncating) `path` and writes the header line.
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        let header = Header {
            format: LOG_FORMAT.into(),
            digest: DIGEST_ALGORITHM.into(),
        };
        writeln!(file, "{}", serde_json::to_string(&header)?)?;
        file.sync_data()?;
        Ok(Self { file })
    }
}

impl AuditSink for FileSink {
    fn persist(&mut self, record: &AuditRecord) -> io::Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(record)?)?;
        self.file.sync_data()
    }
}

#[derive(Debug, Error)]
#[error("audit persistence failed: {0}")]
pub struct AppendError(#[from] pub io::Error);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditFilter {
    pub spiffe_id: Option<String>,
    pub decision: Option<Verdict>,
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl AuditFilter {
    fn accepts(&self, r: &AuditRecord) -> bool {
        self.spiffe_id.as_ref().is_none_or(|s| s == &r.spiffe_id)
            && self.decision.is_none_or(|d| d == r.decision)
            && self.from.is_none_or(|t| r.timestamp >= t)
            && self.to.is_none_or(|t| r.timestamp <= t)
    }
}

pub struct AuditLog {
    records: RwLock<Vec<AuditRecord>>,
    sink: Mutex<Box<dyn AuditSink>>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog")
            .field("len", &self.records.read().len())
            .finish()
    }
}

impl Default for AuditLog {
    fn default() -> Self {
        Self::new(Box::new(MemorySink))
    }
}

impl AuditLog {
    pub fn new(sink: Box<dyn AuditSink>) -> Self {
        Self {
            records: RwLock::new(Vec::new()),
            sink: Mutex::new(sink),
        }
    }

    pub fn append(&self, entry: AuditEntry, now: DateTime<Utc>) -> Result<AuditRecord, AppendError> {
        let mut sink = self.sink.lock();
        let (seq, prev_hash) = {
            let records = self.records.read();
            let prev = records.last().map_or(ZERO_HASH.to_owned(), |r| r.hash.clone());
            (records.len() as u64, prev)
        };
        let mut record = AuditRecord {
            seq,
            timestamp: now,
            spiffe_id: entry.spiffe_id.unwrap_or_else(|| "unverified".into()),
            action: entry.action,
            resource: entry.resource,
            decision: entry.decision,
            reason: entry.reason,
            rule_id: entry.rule_id,
            lease_id: entry.lease_id,
            justification_ref: entry.justification_ref,
            prev_hash,
            hash: String::new(),
        };
        record.hash = record.compute_hash();
        sink.persist(&record)?;
        self.records.write().push(record.clone());
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.read().clone()
    }

    pub fn query(&self, filter: &AuditFilter) -> Vec<AuditRecord> {
        self.records
            .read()
            .iter()
            .filter(|r| filter.accepts(r))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("record at position {position} has seq {seq}; expected {position}")]
    Gap { position: usize, seq: u64 },
    #[error("record {seq} does not link to its predecessor")]
    BrokenLink { seq: u64 },
    #[error("record {seq} hash mismatch")]
    HashMismatch { seq: u64 },
}

impl ChainError {
    /// Sequence number of the first bad record.
    pub fn seq(&self) -> u64 {
        match *self {
            Self::Gap { seq, .. } | Self::BrokenLink { seq } | Self::HashMismatch { seq } => seq,
        }
    }
}

pub fn verify_chain(records: &[AuditRecord]) -> Result<(), ChainError> {
    let mut prev = ZERO_HASH;
    for (position, r) in records.iter().enumerate() {
        if r.seq != position as u64 {
            return Err(ChainError::Gap {
                position,
                seq: r.seq,
            });
        }
        if r.prev_hash != prev {
            return Err(ChainError::BrokenLink { seq: r.seq });
        }
        if r.compute_hash() != r.hash {
            return Err(ChainError::HashMismatch { seq: r.seq });
        }
        prev = &r.hash;
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum LogReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("missing or invalid header line")]
    Header,
    #[error("unsupported digest algorithm {0:?}")]
    Digest(String),
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

pub fn read_log(path: &Path) -> Result<Vec<AuditRecord>, LogReadError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header: Header = lines
        .next()
        .transpose()?
        .and_then(|l| serde_json::from_str(&l).ok())
        .ok_or(LogReadError::Header)?;
    if header.format != LOG_FORMAT {
        return Err(LogReadError::Header);
    }
    if header.digest != DIGEST_ALGORITHM {
        return Err(LogReadError::Digest(header.digest));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| LogReadError::Record {
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}
