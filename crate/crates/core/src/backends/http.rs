use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, EndpointKind, Request, Response};

/// One model server role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendEndpoint {
    pub kind: EndpointKind,
    /// Base URL; `/v1/{kind}` is appended unless already present.
    pub url: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Model identifier echoed into reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_in_flight() -> usize {
    4
}

impl BackendEndpoint {
    pub fn new(kind: EndpointKind, url: impl Into<String>) -> Self {
        Self {
            kind,
            url: url.into(),
            timeout_s: default_timeout(),
            auth_token: None,
            max_in_flight: default_in_flight(),
            model: None,
        }
    }

    pub fn full_url(&self) -> String {
        let path = self.kind.path();
        let base = self.url.trim_end_matches('/');
        if base.ends_with(&path) {
            base.to_string()
        } else {
            format!("{base}{path}")
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(format!("{}: timeout_s must be positive", self.kind));
        }
        if self.max_in_flight == 0 {
            return Err(format!("{}: max_in_flight must be at least 1", self.kind));
        }
        if !(self.url.starts_with("http://") || self.url.starts_with("https://")) {
            return Err(format!("{}: url must be http(s), got {}", self.kind, self.url));
        }
        Ok(())
    }
}

/// Bounded exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(200),
            max_delay: Duration::from_secs(2),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1 << attempt.min(16))
            .min(self.max_delay)
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

struct Route {
    endpoint: BackendEndpoint,
    agent: ureq::Agent,
    gate: Semaphore,
}

/// JSON-over-HTTP client for a set of endpoints. Safe to share across
/// threads; each endpoint caps its own in-flight requests.
pub struct HttpBackend {
    routes: BTreeMap<EndpointKind, Route>,
    retry: RetryPolicy,
}

impl HttpBackend {
    pub fn new(endpoints: impl IntoIterator<Item = BackendEndpoint>, retry: RetryPolicy) -> Self {
        let routes = endpoints
            .into_iter()
            .map(|endpoint| {
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_s)))
                    .http_status_as_error(false)
                    .build()
                    .into();
                let gate = Semaphore::new(endpoint.max_in_flight.max(1));
                (endpoint.kind, Route { endpoint, agent, gate })
            })
            .collect();
        Self { routes, retry }
    }

    pub fn endpoint(&self, kind: EndpointKind) -> Option<&BackendEndpoint> {
        self.routes.get(&kind).map(|r| &r.endpoint)
    }

    fn attempt(route: &Route, kind: EndpointKind, body: &[u8]) -> Result<Response, BackendError> {
        let mut req = route
            .agent
            .post(route.endpoint.full_url())
            .header("content-type", "application/json");
        if let Some(token) = &route.endpoint.auth_token {
            req = req.header("authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout { kind, attempts: 1 },
            other => BackendError::Transport {
                kind,
                attempts: 1,
                message: other.to_string(),
            },
        })?;
        let status = resp.status().as_u16();
        let bytes = resp.body_mut().read_to_vec().map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout { kind, attempts: 1 },
            other => BackendError::Transport {
                kind,
                attempts: 1,
                message: other.to_string(),
            },
        })?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status {
                kind,
                status,
                body: String::from_utf8_lossy(&bytes).chars().take(512).collect(),
            });
        }
        let parsed = Response::from_json(kind, &bytes).map_err(|e| BackendError::Malformed {
            kind,
            message: e.to_string(),
        })?;
        parsed.validate(kind)?;
        Ok(parsed)
    }
}

impl Backend for HttpBackend {
    fn name(&self, kind: EndpointKind) -> String {
        match self.routes.get(&kind) {
            Some(r) => r.endpoint.model.clone().unwrap_or_else(|| r.endpoint.url.clone()),
            None => format!("unconfigured:{kind}"),
        }
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        let kind = request.kind();
        let route = self.routes.get(&kind).ok_or(BackendError::NotConfigured { kind })?;
        let body = request.to_json();
        let _permit = route.gate.acquire();
        let attempts = self.retry.attempts.max(1);
        let mut n = 0;
        loop {
            n += 1;
            match Self::attempt(route, kind, &body) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() && n < attempts => {
                    log::warn!("{kind}: attempt {n}/{attempts} failed: {e}");
                    std::thread::sleep(self.retry.delay(n - 1));
                }
                Err(e) => {
                    return Err(match e {
                        BackendError::Timeout { kind, .. } => BackendError::Timeout { kind, attempts: n },
                        BackendError::Transport { kind, message, .. } => BackendError::Transport {
                            kind,
                            attempts: n,
                            message,
                        },
                        other => other,
                    })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_joining() {
        let e = BackendEndpoint::new(EndpointKind::Chat, "http://host:8000/");
        assert_eq!(e.full_url(), "http://host:8000/v1/chat");
        let e = BackendEndpoint::new(EndpointKind::Chat, "http://host/v1/chat");
        assert_eq!(e.full_url(), "http://host/v1/chat");
    }

    #[test]
    fn backoff_is_bounded() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(0), Duration::from_millis(200));
        assert_eq!(p.delay(1), Duration::from_millis(400));
        assert_eq!(p.delay(10), Duration::from_secs(2));
    }

    #[test]
    fn endpoint_validation() {
        let mut e = BackendEndpoint::new(EndpointKind::Vad, "http://x");
        assert!(e.validate().is_ok());
        e.timeout_s = 0.0;
        assert!(e.validate().is_err());
        let e = BackendEndpoint::new(EndpointKind::Vad, "ftp://x");
        assert!(e.validate().is_err());
    }

    #[test]
    fn missing_route_is_not_configured() {
        let b = HttpBackend::new(Vec::new(), RetryPolicy::default());
        let req = Request::EmbedText(super::super::EmbedTextRequest { text: "a".into() });
        assert!(matches!(b.call(&req), Err(BackendError::NotConfigured { .. })));
    }
}
