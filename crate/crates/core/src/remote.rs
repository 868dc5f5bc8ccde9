//! Minimal JSON-over-HTTP client shared by the remote policy and scorer.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_token: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
    pub model: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            api_token: None,
            timeout_secs: 30.0,
            retries: 2,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HttpFailure {
    Timeout(String),
    Transport(String),
    /// Non-2xx status or unreadable body.
    Protocol(String),
}

impl std::fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HttpFailure::Timeout(m) => write!(f, "timeout: {m}"),
            HttpFailure::Transport(m) => write!(f, "transport: {m}"),
            HttpFailure::Protocol(m) => write!(f, "protocol: {m}"),
        }
    }
}

pub struct JsonClient {
    agent: ureq::Agent,
    config: RemoteConfig,
}

impl JsonClient {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(
                config.timeout_secs.max(0.001),
            )))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, config }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// POSTs `body`, retrying transport failures and timeouts up to the
    /// configured count. Protocol failures are returned immediately.
    pub fn post(&self, body: &Value) -> Result<Value, HttpFailure> {
        let mut last = HttpFailure::Transport("no attempt made".into());
        for _ in 0..=self.config.retries {
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(e @ HttpFailure::Protocol(_)) => return Err(e),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    fn post_once(&self, body: &Value) -> Result<Value, HttpFailure> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.config.api_token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(classify)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(HttpFailure::Protocol(format!("HTTP status {status}")));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| match classify(e) {
                HttpFailure::Transport(m) => HttpFailure::Protocol(format!("unreadable body: {m}")),
                other => other,
            })
    }
}

fn classify(e: ureq::Error) -> HttpFailure {
    match e {
        ureq::Error::Timeout(t) => HttpFailure::Timeout(t.to_string()),
        other => HttpFailure::Transport(other.to_string()),
    }
}
