//! Notification sink that POSTs each notification as JSON.

use std::time::Duration;

use mlcluster_core::domain::Notification;
use mlcluster_core::session::notify::{NotificationSink, SinkError};

#[derive(Debug, Clone)]
pub struct WebhookSink {
    url: String,
    timeout: Duration,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(5),
        }
    }
}

impl NotificationSink for WebhookSink {
    fn deliver(&self, notification: &Notification) -> Result<(), SinkError> {
        // reqwest's blocking client panics when used on an async runtime thread.
        std::thread::scope(|s| {
            s.spawn(|| {
                let client = reqwest::blocking::Client::builder()
                    .timeout(self.timeout)
                    .build()
                    .map_err(|e| SinkError(e.to_string()))?;
                let resp = client
                    .post(&self.url)
                    .json(notification)
                    .send()
                    .map_err(|e| SinkError(e.to_string()))?;
                if resp.status().is_success() {
                    Ok(())
                } else {
                    Err(SinkError(format!("webhook answered {}", resp.status())))
                }
            })
            .join()
            .unwrap_or_else(|_| Err(SinkError("webhook thread panicked".into())))
        })
    }
}
