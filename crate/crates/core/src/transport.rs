//! JSON-over-HTTP transport shared by the remote embedder, reranker and
//! generator clients.
//!
//! Every outbound request in the system goes through a [`Transport`]. This is
//! what lets the allow-list and the recording wrapper see all network traffic.

use std::collections::BTreeSet;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;
use url::Url;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("invalid endpoint url `{0}`")]
    InvalidUrl(String),
    #[error("endpoint `{0}` is not in the allowed endpoint list")]
    Forbidden(String),
    #[error("cannot reach `{url}`: {message}")]
    Unreachable { url: String, message: String },
    #[error("request to `{0}` timed out")]
    Timeout(String),
    #[error("`{url}` answered with HTTP {status}")]
    Status { url: String, status: u16 },
    #[error("malformed response from `{url}`: {message}")]
    Decode { url: String, message: String },
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, body: &Value, timeout: Duration) -> Result<Value, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn post_json(&self, url: &str, body: &Value, timeout: Duration) -> Result<Value, TransportError> {
        (**self).post_json(url, body, timeout)
    }
}

/// `host:port` of an endpoint, lowercased, with the scheme's default port
/// filled in.
pub fn endpoint_authority(url: &str) -> Result<String, TransportError> {
    let parsed = Url::parse(url).map_err(|_| TransportError::InvalidUrl(url.to_string()))?;
    let host = parsed
        .host_str()
        .ok_or_else(|| TransportError::InvalidUrl(url.to_string()))?;
    let port = parsed
        .port_or_known_default()
        .ok_or_else(|| TransportError::InvalidUrl(url.to_string()))?;
    Ok(format!("{}:{port}", host.to_ascii_lowercase()))
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InflightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut current = self.current.lock().expect("limiter poisoned");
        while *current >= self.max {
            current = self.freed.wait(current).expect("limiter poisoned");
        }
        *current += 1;
        InflightPermit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().expect("limiter poisoned")
    }
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut current = self.limiter.current.lock().expect("limiter poisoned");
        *current -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
    limiter: InflightLimiter,
}

impl HttpTransport {
    pub fn new(max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            agent,
            limiter: InflightLimiter::new(max_in_flight),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_IN_FLIGHT)
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, body: &Value, timeout: Duration) -> Result<Value, TransportError> {
        let _permit = self.limiter.acquire();
        let result = self
            .agent
            .post(url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .send_json(body);
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(TransportError::Timeout(url.to_string())),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => {
                return Err(TransportError::Timeout(url.to_string()))
            }
            Err(e) => {
                return Err(TransportError::Unreachable {
                    url: url.to_string(),
                    message: e.to_string(),
                })
            }
        };
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(TransportError::Status {
                url: url.to_string(),
                status,
            });
        }
        response.body_mut().read_json::<Value>().map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout(url.to_string()),
            other => TransportError::Decode {
                url: url.to_string(),
                message: other.to_string(),
            },
        })
    }
}

/// Refuses any request whose `host:port` is not explicitly allowed.
pub struct AllowListTransport<T> {
    inner: T,
    allowed: BTreeSet<String>,
}

impl<T: Transport> AllowListTransport<T> {
    pub fn new<I, S>(inner: T, allowed_endpoints: I) -> Result<Self, TransportError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let allowed = allowed_endpoints
            .into_iter()
            .map(|u| endpoint_authority(u.as_ref()))
            .collect::<Result<_, _>>()?;
        Ok(Self { inner, allowed })
    }

    pub fn allowed(&self) -> &BTreeSet<String> {
        &self.allowed
    }
}

impl<T: Transport> Transport for AllowListTransport<T> {
    fn post_json(&self, url: &str, body: &Value, timeout: Duration) -> Result<Value, TransportError> {
        let authority = endpoint_authority(url)?;
        if !self.allowed.contains(&authority) {
            return Err(TransportError::Forbidden(url.to_string()));
        }
        self.inner.post_json(url, body, timeout)
    }
}

/// Logs every attempted destination before delegating.
pub struct RecordingTransport<T> {
    inner: T,
    urls: Mutex<Vec<String>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            urls: Mutex::new(Vec::new()),
        }
    }

    pub fn urls(&self) -> Vec<String> {
        self.urls.lock().expect("recorder poisoned").clone()
    }

    /// Distinct `host:port` pairs contacted so far. Unparseable URLs are kept verbatim.
    pub fn authorities(&self) -> BTreeSet<String> {
        self.urls()
            .iter()
            .map(|u| endpoint_authority(u).unwrap_or_else(|_| u.clone()))
            .collect()
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn post_json(&self, url: &str, body: &Value, timeout: Duration) -> Result<Value, TransportError> {
        self.urls.lock().expect("recorder poisoned").push(url.to_string());
        self.inner.post_json(url, body, timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Echo;

    impl Transport for Echo {
        fn post_json(&self, _url: &str, body: &Value, _t: Duration) -> Result<Value, TransportError> {
            Ok(body.clone())
        }
    }

    #[test]
    fn authority_normalization() {
        assert_eq!(endpoint_authority("http://LocalHost/v1").unwrap(), "localhost:80");
        assert_eq!(endpoint_authority("https://gpu01:8443/x").unwrap(), "gpu01:8443");
        assert!(endpoint_authority("not a url").is_err());
    }

    #[test]
    fn allow_list_blocks_other_hosts() {
        let t = AllowListTransport::new(Echo, ["http://127.0.0.1:9000/embed"]).unwrap();
        let body = serde_json::json!({"x": 1});
        assert!(t
            .post_json("http://127.0.0.1:9000/other", &body, Duration::from_secs(1))
            .is_ok());
        assert_eq!(
            t.post_json("http://example.com/embed", &body, Duration::from_secs(1)),
            Err(TransportError::Forbidden("http://example.com/embed".into()))
        );
    }

    #[test]
    fn recorder_sees_attempts_even_when_refused() {
        let rec = RecordingTransport::new(AllowListTransport::new(Echo, ["http://a:1"]).unwrap());
        let body = Value::Null;
        let _ = rec.post_json("http://a:1/x", &body, Duration::from_secs(1));
        let _ = rec.post_json("http://b:2/x", &body, Duration::from_secs(1));
        assert_eq!(
            rec.authorities().into_iter().collect::<Vec<_>>(),
            vec!["a:1".to_string(), "b:2".to_string()]
        );
    }

    #[test]
    fn unreachable_server_is_reported() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let t = HttpTransport::new(1);
        let err = t
            .post_json(&format!("http://{addr}/x"), &Value::Null, Duration::from_secs(2))
            .unwrap_err();
        assert!(matches!(err, TransportError::Unreachable { .. }), "{err:?}");
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(InflightLimiter::new(2));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let limiter = limiter.clone();
                let peak = peak.clone();
                std::thread::spawn(move || {
                    let _p = limiter.acquire();
                    peak.fetch_max(limiter.in_flight(), Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(limiter.in_flight(), 0);
    }
}
