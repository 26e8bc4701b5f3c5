//! Delivery of failure notifications to pluggable sinks.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::domain::Notification;

#[derive(Debug, thiserror::Error)]
#[error("notification sink failed: {0}")]
pub struct SinkError(pub String);

pub trait NotificationSink: Send + Sync {
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError>;
}

/// Appends one JSON object per line.
#[derive(Debug, Clone)]
pub struct FileSink {
    path: PathBuf,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }
}

impl NotificationSink for FileSink {
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError> {
        let line = serde_json::to_string(notification).map_err(|e| SinkError(e.to_string()))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| SinkError(format!("{}: {e}", self.path.display())))?;
        writeln!(f, "{line}").map_err(|e| SinkError(e.to_string()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    delivered: Arc<Mutex<Vec<Notification>>>,
}

impl MemorySink {
    pub fn delivered(&self) -> Vec<Notification> {
        self.delivered.lock().expect("sink lock").clone()
    }
}

impl NotificationSink for MemorySink {
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError> {
        self.delivered
            .lock()
            .expect("sink lock")
            .push(notification.clone());
        Ok(())
    }
}

/// Fans notifications out to every sink, retrying each a bounded number of times.
pub struct Dispatcher {
    sinks: Vec<Box<dyn NotificationSink>>,
    max_attempts: u32,
    dropped: u64,
}

impl Dispatcher {
    pub fn new(max_attempts: u32) -> Self {
        Self {
            sinks: Vec::new(),
            max_attempts: max_attempts.max(1),
            dropped: 0,
        }
    }

    pub fn with_sink(mut self, sink: impl NotificationSink + 'static) -> Self {
        self.sinks.push(Box::new(sink));
        self
    }

    /// Deliveries abandoned after exhausting their attempts.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn dispatch(&mut self, notifications: &[Notification]) {
        for n in notifications {
            for sink in &self.sinks {
                let mut attempt = 0;
                loop {
                    attempt += 1;
                    match sink.deliver(n) {
                        Ok(()) => break,
                        Err(e) if attempt < self.max_attempts => {
                            tracing::debug!(attempt, error = %e, "retrying notification");
                        }
                        Err(e) => {
                            tracing::error!(session = %n.session_id, error = %e, "notification dropped");
                            self.dropped += 1;
                            break;
                        }
                    }
                }
            }
        }
    }
}

impl std::fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dispatcher")
            .field("sinks", &self.sinks.len())
            .field("max_attempts", &self.max_attempts)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};

    use super::*;
    use crate::domain::NotificationKind;

    fn note() -> Notification {
        Notification {
            recipient: "u".into(),
            session_id: "u/d/1".into(),
            kind: NotificationKind::KilledOom,
            detail: "oom".into(),
            timestamp: 5,
        }
    }

    struct Flaky {
        failures: u32,
        calls: Arc<AtomicU32>,
    }

    impl NotificationSink for Flaky {
        fn deliver(&self, _: &Notification) -> Result<(), SinkError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(SinkError("down".into()))
            } else {
                Ok(())
            }
        }
    }

    #[test]
    fn retries_until_delivered() {
        let calls = Arc::new(AtomicU32::new(0));
        let mut d = Dispatcher::new(3).with_sink(Flaky {
            failures: 2,
            calls: calls.clone(),
        });
        d.dispatch(&[note()]);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(d.dropped(), 0);
    }

    #[test]
    fn gives_up_after_bounded_attempts() {
        let calls = Arc::new(AtomicU32::new(0));
        let mut d = Dispatcher::new(3).with_sink(Flaky {
            failures: 10,
            calls: calls.clone(),
        });
        d.dispatch(&[note()]);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(d.dropped(), 1);
    }

    #[test]
    fn file_sink_writes_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.jsonl");
        let sink = FileSink::new(&path);
        sink.deliver(&note()).unwrap();
        sink.deliver(&note()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<Notification> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed, vec![note(), note()]);
    }
}
