//! Append-only JSON-lines event log with snapshot files.
//!
//! Line format: `{"seq":N,"kind":"...","id":"...","ts":MS,"payload":{...}}`.
//! Sequence numbers start at 1 and are gapless.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub kind: String,
    pub id: String,
    pub ts: Millis,
    pub payload: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log storage failure: {0}")]
    Io(#[from] io::Error),

    #[error("corrupt record at line {line} (after seq {last_good}): {reason}")]
    Corrupt {
        line: usize,
        last_good: u64,
        reason: String,
    },

    #[error("sequence gap: expected {expected}, found {found}")]
    Gap { expected: u64, found: u64 },

    #[error("replay must start at sequence 1 or later")]
    BadStart,

    #[error("cannot encode record: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Parses one line of a log file.
pub fn parse_line(line: &str) -> Result<LogRecord, serde_json::Error> {
    serde_json::from_str(line)
}

/// Reads records from a log stream, validating gaplessness.
///
/// Blank lines are skipped. The first malformed or out-of-order record halts
/// the read with its line number and the last good sequence.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<LogRecord>, LogError> {
    let mut out: Vec<LogRecord> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let last_good = out.last().map_or(0, |r| r.seq);
        let record = parse_line(&line).map_err(|e| LogError::Corrupt {
            line: idx + 1,
            last_good,
            reason: e.to_string(),
        })?;
        if record.seq != last_good + 1 {
            return Err(LogError::Corrupt {
                line: idx + 1,
                last_good,
                reason: format!("expected seq {}, found {}", last_good + 1, record.seq),
            });
        }
        out.push(record);
    }
    Ok(out)
}

struct Inner {
    records: Vec<LogRecord>,
    /// Sequence of the first retained record minus one (non-zero after compaction).
    base: u64,
    writer: Option<BufWriter<File>>,
}

pub struct EventLog {
    inner: RwLock<Inner>,
    path: Option<PathBuf>,
    sync: bool,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog")
            .field("path", &self.path)
            .field("max_seq", &self.max_seq())
            .finish()
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self {
            inner: RwLock::new(Inner {
                records: Vec::new(),
                base: 0,
                writer: None,
            }),
            path: None,
            sync: false,
        }
    }

    /// Opens (or creates) a file-backed log, loading and validating existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let records = match File::open(&path) {
            Ok(f) => read_records(BufReader::new(f))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            inner: RwLock::new(Inner {
                records,
                base: 0,
                writer: Some(BufWriter::new(file)),
            }),
            path: Some(path),
            sync: false,
        })
    }

    /// Builds an in-memory log from already-validated records.
    pub fn from_records(records: Vec<LogRecord>) -> Result<Self, LogError> {
        let log = Self::in_memory();
        for r in records {
            log.append_record(r)?;
        }
        Ok(log)
    }

    /// fsync after every append instead of only flushing.
    pub fn with_sync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn max_seq(&self) -> u64 {
        let inner = self.inner.read().expect("log lock poisoned");
        inner.base + inner.records.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.max_seq() == 0
    }

    /// Appends a new record and returns its sequence number.
    pub fn append(
        &self,
        kind: &str,
        id: &str,
        ts: Millis,
        payload: serde_json::Value,
    ) -> Result<u64, LogError> {
        let mut inner = self.inner.write().expect("log lock poisoned");
        let seq = inner.base + inner.records.len() as u64 + 1;
        let record = LogRecord {
            seq,
            kind: kind.to_owned(),
            id: id.to_owned(),
            ts,
            payload,
        };
        Self::persist(&mut inner, &record, self.sync)?;
        inner.records.push(record);
        Ok(seq)
    }

    /// Appends a record produced elsewhere (replication). Its sequence must be next.
    pub fn append_record(&self, record: LogRecord) -> Result<u64, LogError> {
        let mut inner = self.inner.write().expect("log lock poisoned");
        let expected = inner.base + inner.records.len() as u64 + 1;
        if record.seq != expected {
            return Err(LogError::Gap {
                expected,
                found: record.seq,
            });
        }
        Self::persist(&mut inner, &record, self.sync)?;
        let seq = record.seq;
        inner.records.push(record);
        Ok(seq)
    }

    fn persist(inner: &mut Inner, record: &LogRecord, sync: bool) -> Result<(), LogError> {
        if let Some(w) = inner.writer.as_mut() {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n")?;
            w.flush()?;
            if sync {
                w.get_ref().sync_data()?;
            }
        }
        Ok(())
    }

    /// Every record with `seq >= from`, in order.
    pub fn replay(&self, from: u64) -> Result<Vec<LogRecord>, LogError> {
        if from == 0 {
            return Err(LogError::BadStart);
        }
        Ok(self.range(from, u64::MAX))
    }

    /// Records with `from <= seq <= to` that are still retained.
    pub fn range(&self, from: u64, to: u64) -> Vec<LogRecord> {
        let inner = self.inner.read().expect("log lock poisoned");
        let start = from.saturating_sub(inner.base + 1) as usize;
        inner
            .records
            .iter()
            .skip(start)
            .take_while(|r| r.seq <= to)
            .filter(|r| r.seq >= from)
            .cloned()
            .collect()
    }

    pub fn get(&self, seq: u64) -> Option<LogRecord> {
        self.range(seq, seq).pop()
    }
}

/// A point-in-time copy of replayed state, tagged with the last sequence it covers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot<S> {
    pub max_seq: u64,
    pub state: S,
}

impl<S: Serialize + DeserializeOwned> Snapshot<S> {
    /// Writes atomically via a temp file and rename.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), LogError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, self)?;
            w.flush()?;
            w.get_ref().sync_data()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let f = File::open(path)?;
        serde_json::from_reader(BufReader::new(f)).map_err(|e| LogError::Corrupt {
            line: 1,
            last_good: 0,
            reason: e.to_string(),
        })
    }

    pub fn parse(raw: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(raw)
    }
}
