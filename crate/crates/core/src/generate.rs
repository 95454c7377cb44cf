//! Grounded answer generation against a local model server.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::embed::ModelMode;
use crate::index::RankedHit;
use crate::transport::{Transport, TransportError};

/// Sentence every prompt must carry verbatim.
pub const GROUNDING_SENTENCE: &str = "Answer strictly and only from the numbered context passages above; if the context does not contain the answer, say so.";

pub const NO_CONTEXT_MARKER: &str = "NO CONTEXT AVAILABLE";

pub const DEFAULT_MAX_CONTEXT_CHARS: usize = 12_000;

pub fn default_preamble() -> String {
    format!(
        "You are an assistant for members of an experimental collaboration, answering \
         questions about one internal analysis. Cite passages by their bracketed number.\n\
         {GROUNDING_SENTENCE}"
    )
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("generator unavailable: {0}")]
    Unavailable(TransportError),
    #[error("generation timed out: {0}")]
    Timeout(TransportError),
    #[error("malformed generator response: {0}")]
    Malformed(String),
    #[error("invalid generation configuration: {0}")]
    InvalidConfig(String),
}

impl From<TransportError> for GenerateError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Timeout(_) => GenerateError::Timeout(e),
            other => GenerateError::Unavailable(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub mode: ModelMode,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub max_context_chars: usize,
    pub grounding_preamble: String,
    pub timeout_s: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Stub,
            endpoint_url: None,
            model_name: "mistral:7b-instruct-q4_0".into(),
            max_context_chars: DEFAULT_MAX_CONTEXT_CHARS,
            grounding_preamble: default_preamble(),
            timeout_s: 120,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.max_context_chars == 0 {
            return Err(GenerateError::InvalidConfig("max_context_chars must be > 0".into()));
        }
        if !self.grounding_preamble.contains(GROUNDING_SENTENCE) {
            return Err(GenerateError::InvalidConfig(
                "grounding_preamble must contain the grounding sentence".into(),
            ));
        }
        if self.mode == ModelMode::Remote && self.endpoint_url.is_none() {
            return Err(GenerateError::InvalidConfig("remote mode requires endpoint_url".into()));
        }
        Ok(())
    }

    pub fn build(&self, transport: Arc<dyn Transport>) -> Result<Arc<dyn Generator>, GenerateError> {
        self.validate()?;
        Ok(match self.mode {
            ModelMode::Stub => Arc::new(StubGenerator),
            ModelMode::Remote => Arc::new(RemoteGenerator {
                endpoint_url: self.endpoint_url.clone().unwrap_or_default(),
                model_name: self.model_name.clone(),
                timeout: Duration::from_secs(self.timeout_s),
                transport,
            }),
        })
    }
}

/// A reranked hit together with the passage text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPassage {
    #[serde(flatten)]
    pub hit: RankedHit,
    pub text: String,
}

/// Number of leading passages whose texts fit in `max_chars` characters.
/// The first passage always counts, whatever its size.
pub fn fitting_passages(passages: &[ContextPassage], max_chars: usize) -> usize {
    let mut kept = 0;
    let mut used = 0usize;
    for p in passages {
        let len = p.text.chars().count();
        if kept > 0 && used + len > max_chars {
            break;
        }
        used += len;
        kept += 1;
    }
    kept
}

/// Builds the grounding prompt.
///
/// Passages are expected in rank order. Lowest-ranked passages are dropped
/// until the passage texts fit in `max_context_chars`; the first passage is
/// kept regardless of its size.
pub fn assemble_prompt(query: &str, passages: &[ContextPassage], config: &GenerationConfig) -> String {
    let kept = fitting_passages(passages, config.max_context_chars);
    let used: usize = passages[..kept].iter().map(|p| p.text.len()).sum();

    let mut prompt = String::with_capacity(config.grounding_preamble.len() + used + query.len() + 256);
    prompt.push_str(&config.grounding_preamble);
    prompt.push_str("\n\nContext passages:\n");
    if kept == 0 {
        prompt.push_str(NO_CONTEXT_MARKER);
        prompt.push('\n');
    }
    for (i, p) in passages[..kept].iter().enumerate() {
        prompt.push_str(&format!("\n[{}] ({})\n{}\n", i + 1, p.hit.chunk_id, p.text));
    }
    prompt.push_str("\nQuestion: ");
    prompt.push_str(query);
    prompt.push_str("\nAnswer:");
    prompt
}

/// Chunk ids cited in a prompt, in passage order.
pub fn cited_chunk_ids(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix('[')?;
            let (num, tail) = rest.split_once("] (")?;
            if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            tail.strip_suffix(')').map(str::to_string)
        })
        .collect()
}

pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, GenerateError>;
}

/// Echoes the chunk ids found in the prompt; no model involved.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubGenerator;

impl Generator for StubGenerator {
    fn generate(&self, prompt: &str) -> Result<String, GenerateError> {
        if prompt.is_empty() {
            return Err(GenerateError::EmptyPrompt);
        }
        let ids = cited_chunk_ids(prompt);
        if ids.is_empty() {
            return Ok("The provided context does not contain the answer.".into());
        }
        let refs: Vec<String> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| format!("[{}] {id}", i + 1))
            .collect();
        Ok(format!("Answer drawn from the context passages {}.", refs.join("; ")))
    }
}

/// Client for `{"model", "prompt", "stream": false}` → `{"response"}`.
pub struct RemoteGenerator {
    endpoint_url: String,
    model_name: String,
    timeout: Duration,
    transport: Arc<dyn Transport>,
}

impl RemoteGenerator {
    pub fn new(
        endpoint_url: impl Into<String>,
        model_name: impl Into<String>,
        timeout: Duration,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            timeout,
            transport,
        }
    }
}

impl Generator for RemoteGenerator {
    fn generate(&self, prompt: &str) -> Result<String, GenerateError> {
        if prompt.is_empty() {
            return Err(GenerateError::EmptyPrompt);
        }
        let body = json!({ "model": self.model_name, "prompt": prompt, "stream": false });
        let response = self.transport.post_json(&self.endpoint_url, &body, self.timeout)?;
        response
            .get("response")
            .and_then(|r| r.as_str())
            .map(str::to_string)
            .ok_or_else(|| GenerateError::Malformed("missing `response` string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::HttpTransport;
    use serde_json::Value;
    use std::sync::Mutex;

    fn passage(rank: usize, id: &str, text: &str) -> ContextPassage {
        ContextPassage {
            hit: RankedHit {
                chunk_id: id.into(),
                analysis_id: "a".into(),
                score: 1.0 / rank as f64,
                rank,
            },
            text: text.into(),
        }
    }

    #[test]
    fn empty_context_is_marked() {
        let p = assemble_prompt("What is the pt cut?", &[], &GenerationConfig::default());
        assert!(p.contains(GROUNDING_SENTENCE));
        assert!(p.contains(NO_CONTEXT_MARKER));
        assert!(p.contains("What is the pt cut?"));
    }

    #[test]
    fn passages_appear_once_in_rank_order() {
        let ps: Vec<_> = (1..=5).map(|r| passage(r, &format!("doc#{r}"), "some text")).collect();
        let p = assemble_prompt("q", &ps, &GenerationConfig::default());
        let mut last = 0;
        for r in 1..=5 {
            let tag = format!("(doc#{r})");
            assert_eq!(p.matches(&tag).count(), 1);
            let at = p.find(&tag).unwrap();
            assert!(at > last);
            last = at;
        }
        assert_eq!(
            cited_chunk_ids(&p),
            (1..=5).map(|r| format!("doc#{r}")).collect::<Vec<_>>()
        );
        assert!(!p.contains(NO_CONTEXT_MARKER));
    }

    #[test]
    fn oversized_context_drops_tail() {
        let config = GenerationConfig {
            max_context_chars: 25,
            ..GenerationConfig::default()
        };
        let ps = vec![
            passage(1, "r1", &"x".repeat(40)),
            passage(2, "r2", "short"),
            passage(3, "r3", "short"),
        ];
        let p = assemble_prompt("q", &ps, &config);
        assert_eq!(cited_chunk_ids(&p), vec!["r1"]);

        let ps = vec![
            passage(1, "r1", &"x".repeat(10)),
            passage(2, "r2", &"y".repeat(10)),
            passage(3, "r3", &"z".repeat(10)),
        ];
        assert_eq!(cited_chunk_ids(&assemble_prompt("q", &ps, &config)), vec!["r1", "r2"]);
    }

    #[test]
    fn stub_echoes_ids_deterministically() {
        let ps = vec![passage(1, "X#0", "alpha"), passage(2, "Y#3", "beta")];
        let prompt = assemble_prompt("q", &ps, &GenerationConfig::default());
        let a = StubGenerator.generate(&prompt).unwrap();
        assert!(a.contains("X#0") && a.contains("Y#3"));
        assert_eq!(a, StubGenerator.generate(&prompt).unwrap());
        assert!(matches!(StubGenerator.generate(""), Err(GenerateError::EmptyPrompt)));
    }

    #[test]
    fn preamble_without_grounding_is_rejected() {
        let config = GenerationConfig {
            grounding_preamble: "be helpful".into(),
            ..GenerationConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn remote_down_is_unavailable() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let g = RemoteGenerator::new(
            format!("http://{addr}/api/generate"),
            "m",
            Duration::from_secs(2),
            Arc::new(HttpTransport::new(1)),
        );
        assert!(matches!(g.generate("prompt"), Err(GenerateError::Unavailable(_))));
    }

    #[test]
    fn remote_timeout_maps_to_timeout() {
        struct Slow;
        impl Transport for Slow {
            fn post_json(&self, url: &str, _b: &Value, _t: Duration) -> Result<Value, TransportError> {
                Err(TransportError::Timeout(url.into()))
            }
        }
        let g = RemoteGenerator::new("http://h:1/g", "m", Duration::from_millis(1), Arc::new(Slow));
        assert!(matches!(g.generate("p"), Err(GenerateError::Timeout(_))));
    }

    #[test]
    fn remote_wire_shape() {
        struct Capture(Mutex<Option<Value>>);
        impl Transport for Capture {
            fn post_json(&self, _u: &str, b: &Value, _t: Duration) -> Result<Value, TransportError> {
                *self.0.lock().unwrap() = Some(b.clone());
                Ok(json!({"response": "ok"}))
            }
        }
        let cap = Arc::new(Capture(Mutex::new(None)));
        let g = RemoteGenerator::new("http://h:1/g", "mistral", Duration::from_secs(1), cap.clone());
        assert_eq!(g.generate("hello").unwrap(), "ok");
        assert_eq!(
            cap.0.lock().unwrap().clone().unwrap(),
            json!({"model": "mistral", "prompt": "hello", "stream": false})
        );
    }
}
