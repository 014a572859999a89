use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, FixtureSearch, GatewayError, GenerationRequest, GenerationResponse};

/// One canned reply: either bare text or text plus token likelihoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Full {
        text: String,
        #[serde(default)]
        token_likelihoods: Option<Vec<f64>>,
    },
}

impl ScriptedReply {
    fn to_response(&self) -> GenerationResponse {
        match self {
            ScriptedReply::Text(t) => GenerationResponse::text(t.clone()),
            ScriptedReply::Full {
                text,
                token_likelihoods,
            } => GenerationResponse {
                token_likelihoods: token_likelihoods.clone(),
                ..GenerationResponse::text(text.clone())
            },
        }
    }
}

impl From<&str> for ScriptedReply {
    fn from(s: &str) -> Self {
        ScriptedReply::Text(s.to_string())
    }
}

fn default_true() -> bool {
    true
}

/// On-disk fixture for the scripted backend.
///
/// `responses` maps a request tag to the replies returned by successive
/// calls with that tag. A key of the form `<base>#*` serves tags
/// `<base>#<i>` by index instead, which keeps concurrent sampling
/// deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFixture {
    #[serde(default)]
    pub responses: BTreeMap<String, Vec<ScriptedReply>>,
    #[serde(default = "default_true")]
    pub logprobs_supported: bool,
    /// Canned passages for the fixture search backend.
    #[serde(default)]
    pub search: BTreeMap<String, String>,
}

impl Default for ScriptedFixture {
    fn default() -> Self {
        Self {
            responses: BTreeMap::new(),
            logprobs_supported: true,
            search: BTreeMap::new(),
        }
    }
}

impl ScriptedFixture {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Deterministic backend that replays a [`ScriptedFixture`] and logs every
/// call it receives.
#[derive(Debug)]
pub struct ScriptedBackend {
    fixture: ScriptedFixture,
    cursors: Mutex<HashMap<String, usize>>,
    log: Mutex<Vec<String>>,
}

/// Build a scripted backend from a tag → replies mapping.
pub fn script_backend(responses: BTreeMap<String, Vec<ScriptedReply>>) -> ScriptedBackend {
    ScriptedBackend::new(ScriptedFixture {
        responses,
        ..ScriptedFixture::default()
    })
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        Self {
            fixture,
            cursors: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::new(ScriptedFixture::load(path)?))
    }

    pub fn without_logprobs(mut self) -> Self {
        self.fixture.logprobs_supported = false;
        self
    }

    pub fn search_backend(&self) -> FixtureSearch {
        FixtureSearch::new(self.fixture.search.clone())
    }

    /// Tags of every call received so far, in arrival order.
    pub fn calls(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn calls_with_suffix(&self, suffix: &str) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|t| t.ends_with(suffix))
            .count()
    }

    fn lookup(&self, tag: &str) -> Option<&ScriptedReply> {
        if let Some(replies) = self.fixture.responses.get(tag) {
            let mut cursors = self.cursors.lock().unwrap();
            let n = cursors.entry(tag.to_string()).or_insert(0);
            let reply = replies.get(*n);
            *n += 1;
            return reply;
        }
        let (base, idx) = tag.rsplit_once('#')?;
        let idx: usize = idx.parse().ok()?;
        self.fixture
            .responses
            .get(&format!("{base}#*"))
            .and_then(|replies| replies.get(idx))
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        self.log.lock().unwrap().push(request.request_tag.clone());
        if request.want_logprobs && !self.fixture.logprobs_supported {
            return Err(GatewayError::LogprobsUnsupported {
                model: request.model.clone(),
            });
        }
        let reply =
            self.lookup(&request.request_tag)
                .ok_or_else(|| GatewayError::FixtureExhausted {
                    tag: request.request_tag.clone(),
                })?;
        let mut response = reply.to_response();
        if !request.want_logprobs {
            response.token_likelihoods = None;
        }
        Ok(response)
    }
}
