//! Length-prefixed canonical field encoding shared by everything that is
//! signed or hashed.
//!
//! Each field is a big-endian `u32` byte length followed by the bytes.
//! Instants are RFC 3339 UTC text; counts are a bare `u32`.

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("truncated input")]
    Truncated,
    #[error("field is not UTF-8")]
    Utf8,
    #[error("bad instant {0:?}")]
    Instant(String),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

pub fn render_instant(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

#[derive(Default)]
pub struct FieldWriter {
    buf: Vec<u8>,
}

impl FieldWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        let len = u32::try_from(b.len()).expect("field shorter than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(b);
    }

    pub fn text(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn opt_text(&mut self, s: Option<&str>) {
        match s {
            Some(s) => {
                self.count(1);
                self.text(s);
            }
            None => self.count(0),
        }
    }

    pub fn instant(&mut self, t: &DateTime<Utc>) {
        self.text(&render_instant(t));
    }

    pub fn count(&mut self, n: usize) {
        let n = u32::try_from(n).expect("count fits in u32");
        self.buf.extend_from_slice(&n.to_be_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct FieldReader<'a> {
    rest: &'a [u8],
}

impl<'a> FieldReader<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Self { rest: input }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.rest.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    pub fn count(&mut self) -> Result<usize, WireError> {
        let raw = self.take(4)?;
        Ok(u32::from_be_bytes(raw.try_into().expect("4 bytes")) as usize)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.count()?;
        self.take(n)
    }

    pub fn text(&mut self) -> Result<String, WireError> {
        std::str::from_utf8(self.bytes()?)
            .map(str::to_owned)
            .map_err(|_| WireError::Utf8)
    }

    pub fn instant(&mut self) -> Result<DateTime<Utc>, WireError> {
        let s = self.text()?;
        DateTime::parse_from_rfc3339(&s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|_| WireError::Instant(s))
    }

    pub fn finish(self) -> Result<(), WireError> {
        match self.rest.len() {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}
