use std::collections::BTreeMap;

use reqwest::blocking::Client;
use serde_json::{json, Value};

use super::{GatewayError, LiveConfig};

/// Source of short explanatory passages for a knowledge query.
pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str) -> Result<String, GatewayError>;
}

/// Look up a passage for `query`. Empty queries are rejected.
pub fn web_search(backend: &dyn SearchBackend, query: &str) -> Result<String, GatewayError> {
    let query = query.trim();
    if query.is_empty() {
        return Err(GatewayError::InvalidRequest("search query is empty".into()));
    }
    backend.search(query)
}

fn normalize_query(q: &str) -> String {
    q.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Canned passages keyed by query (case- and whitespace-insensitive).
#[derive(Debug, Clone, Default)]
pub struct FixtureSearch {
    passages: BTreeMap<String, String>,
}

impl FixtureSearch {
    pub fn new(passages: BTreeMap<String, String>) -> Self {
        Self {
            passages: passages
                .into_iter()
                .map(|(k, v)| (normalize_query(&k), v))
                .collect(),
        }
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let map: BTreeMap<String, String> = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(Self::new(map))
    }
}

impl SearchBackend for FixtureSearch {
    fn search(&self, query: &str) -> Result<String, GatewayError> {
        self.passages
            .get(&normalize_query(query))
            .cloned()
            .ok_or_else(|| GatewayError::SearchUnavailable(format!("no passage for {query:?}")))
    }
}

/// Search that is never available; forces the synthesis fallback.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoSearch;

impl SearchBackend for NoSearch {
    fn search(&self, _query: &str) -> Result<String, GatewayError> {
        Err(GatewayError::SearchUnavailable(
            "no search backend configured".into(),
        ))
    }
}

/// Provider-hosted web search via the Responses endpoint's search tool.
#[derive(Debug, Clone)]
pub struct LiveSearch {
    config: LiveConfig,
    model: String,
    client: Client,
}

impl LiveSearch {
    pub fn new(config: LiveConfig, model: impl Into<String>) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        Ok(Self {
            config,
            model: model.into(),
            client,
        })
    }
}

/// Concatenate the `output_text` parts of a Responses API body.
fn output_text(body: &Value) -> Option<String> {
    if let Some(s) = body.get("output_text").and_then(Value::as_str) {
        return Some(s.to_string());
    }
    let parts: Vec<&str> = body
        .get("output")?
        .as_array()?
        .iter()
        .filter_map(|item| item.get("content")?.as_array())
        .flatten()
        .filter(|c| c.get("type").and_then(Value::as_str) == Some("output_text"))
        .filter_map(|c| c.get("text")?.as_str())
        .collect();
    (!parts.is_empty()).then(|| parts.join("\n"))
}

impl SearchBackend for LiveSearch {
    fn search(&self, query: &str) -> Result<String, GatewayError> {
        let url = format!("{}/responses", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.model,
            "tools": [{"type": "web_search_preview"}],
            "input": format!("Briefly explain the following concept in a short passage: {query}"),
        });
        let resp = self
            .client
            .post(url)
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
            .map_err(|e| GatewayError::SearchUnavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(GatewayError::SearchUnavailable(format!(
                "{status}: {}",
                resp.text().unwrap_or_default()
            )));
        }
        let value: Value = resp
            .json()
            .map_err(|e| GatewayError::SearchUnavailable(e.to_string()))?;
        output_text(&value)
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| GatewayError::SearchUnavailable("empty search result".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> FixtureSearch {
        let mut m = BTreeMap::new();
        m.insert(
            "battery function".to_string(),
            "A battery stores chemical energy and converts it to electrical energy.".to_string(),
        );
        FixtureSearch::new(m)
    }

    #[test]
    fn canned_passage() {
        let p = web_search(&fixture(), "Battery  function").unwrap();
        assert!(p.contains("chemical energy"));
    }

    #[test]
    fn unknown_query_unavailable() {
        assert!(matches!(
            web_search(&fixture(), "photosynthesis"),
            Err(GatewayError::SearchUnavailable(_))
        ));
    }

    #[test]
    fn empty_query_rejected() {
        assert!(matches!(
            web_search(&fixture(), "  "),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn responses_output_text_parts() {
        let v = json!({"output": [
            {"type": "web_search_call"},
            {"type": "message", "content": [{"type": "output_text", "text": "passage"}]}
        ]});
        assert_eq!(output_text(&v).as_deref(), Some("passage"));
    }
}
