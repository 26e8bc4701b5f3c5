use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// What `login` leaves behind for later invocations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Credentials {
    pub host: String,
    pub token: String,
    pub user_id: String,
}

fn home() -> Result<PathBuf> {
    if let Some(dir) = std::env::var_os("MLCLUSTER_HOME") {
        return Ok(PathBuf::from(dir));
    }
    let home = std::env::var_os("HOME").ok_or_else(|| anyhow!("HOME is not set"))?;
    Ok(PathBuf::from(home).join(".mlcluster"))
}

fn credentials_path() -> Result<PathBuf> {
    Ok(home()?.join("credentials.json"))
}

pub fn load_credentials() -> Option<Credentials> {
    let raw = std::fs::read_to_string(credentials_path().ok()?).ok()?;
    serde_json::from_str(&raw).ok()
}

pub fn save_credentials(c: &Credentials) -> Result<()> {
    let path = credentials_path()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(&path, serde_json::to_vec_pretty(c)?)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn forget_credentials() -> Result<()> {
    match std::fs::remove_file(credentials_path()?) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

/// Percent-encodes one path segment; session ids contain `/`.
pub fn segment(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for b in raw.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(b as char)
            }
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
    message: String,
}

pub struct Api {
    host: String,
    token: Option<String>,
    http: Client,
}

impl Api {
    pub fn new(host: String, token: Option<String>) -> Result<Self> {
        let http = Client::builder()
            .timeout(None::<Duration>)
            .build()
            .context("building http client")?;
        Ok(Self {
            host: host.trim_end_matches('/').to_owned(),
            token,
            http,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.host)
    }

    fn authed(&self, req: RequestBuilder) -> RequestBuilder {
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    fn send(&self, req: RequestBuilder) -> Result<Response> {
        let resp = self
            .authed(req)
            .send()
            .with_context(|| format!("cannot reach {}", self.host))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        match serde_json::from_str::<ErrorBody>(&text) {
            Ok(e) => bail!("{} ({}): {}", e.error, status.as_u16(), e.message),
            Err(_) => bail!("server returned {status}: {}", text.trim()),
        }
    }

    /// GET and return the raw body.
    pub fn get<Q: Serialize + ?Sized>(&self, path: &str, query: &Q) -> Result<String> {
        Ok(self
            .send(self.http.get(self.url(path)).query(query))?
            .text()?)
    }

    /// POST a JSON body and return the raw response body.
    pub fn post<B: Serialize + ?Sized>(&self, path: &str, body: &B) -> Result<String> {
        Ok(self
            .send(self.http.post(self.url(path)).json(body))?
            .text()?)
    }

    /// GET a line-delimited JSON stream, calling `each` per line as it arrives.
    pub fn stream<Q: Serialize + ?Sized>(
        &self,
        path: &str,
        query: &Q,
        mut each: impl FnMut(&str) -> Result<()>,
    ) -> Result<()> {
        let resp = self.send(self.http.get(self.url(path)).query(query))?;
        for line in BufReader::new(resp).lines() {
            let line = line.context("reading stream")?;
            if !line.trim().is_empty() {
                each(&line)?;
            }
        }
        Ok(())
    }
}

pub fn decode<T: DeserializeOwned>(body: &str) -> Result<T> {
    serde_json::from_str(body).context("unexpected response body")
}
