use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{Backend, GatewayError, GenerationRequest, GenerationResponse};
use crate::clock::Clock;
use crate::jsonl;

/// One line of `cache.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub request: GenerationRequest,
    pub response: GenerationResponse,
    pub timestamp: String,
}

/// Read cache records, skipping a torn final line.
fn load_records(path: &Path) -> Result<Vec<CacheRecord>, GatewayError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(rec) => out.push(rec),
            Err(e) => warn!(line = i + 1, error = %e, "skipping unreadable cache line"),
        }
    }
    Ok(out)
}

/// Persistent response cache in front of another backend.
///
/// New entries are buffered until [`CachedBackend::flush`], which appends them
/// sorted by request tag. Callers flush once a unit of work has been
/// persisted, so the file order does not depend on thread timing.
pub struct CachedBackend<B> {
    inner: B,
    path: Option<PathBuf>,
    clock: Clock,
    entries: RwLock<HashMap<String, GenerationResponse>>,
    pending: Mutex<Vec<CacheRecord>>,
    provider_calls: AtomicUsize,
    hits: AtomicUsize,
}

impl<B: Backend> CachedBackend<B> {
    /// Cache backed by a JSONL file; existing records are loaded.
    pub fn open(inner: B, path: impl Into<PathBuf>, clock: Clock) -> Result<Self, GatewayError> {
        let path = path.into();
        let entries = load_records(&path)?
            .into_iter()
            .map(|r| (r.key, r.response))
            .collect();
        Ok(Self {
            inner,
            path: Some(path),
            clock,
            entries: RwLock::new(entries),
            pending: Mutex::new(Vec::new()),
            provider_calls: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        })
    }

    pub fn in_memory(inner: B) -> Self {
        Self {
            inner,
            path: None,
            clock: Clock::fixed_epoch(),
            entries: RwLock::new(HashMap::new()),
            pending: Mutex::new(Vec::new()),
            provider_calls: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    /// Calls forwarded to the wrapped backend by this instance.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append buffered entries to the cache file.
    pub fn flush(&self) -> Result<(), GatewayError> {
        let mut pending = std::mem::take(&mut *self.pending.lock().unwrap());
        let Some(path) = &self.path else {
            return Ok(());
        };
        if pending.is_empty() {
            return Ok(());
        }
        pending.sort_by(|a, b| {
            a.request
                .request_tag
                .cmp(&b.request.request_tag)
                .then_with(|| a.key.cmp(&b.key))
        });
        jsonl::append(path, &pending).map_err(|e| match e {
            jsonl::JsonlError::Io(io) => GatewayError::Cache(io),
            other => GatewayError::Cache(std::io::Error::other(other.to_string())),
        })
    }

    /// Forget buffered entries from a unit of work that did not complete.
    pub fn discard_pending(&self) {
        let pending = std::mem::take(&mut *self.pending.lock().unwrap());
        let mut entries = self.entries.write().unwrap();
        for rec in pending {
            entries.remove(&rec.key);
        }
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        let key = request.cache_key();
        if let Some(hit) = self.entries.read().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.clone());
        }
        self.provider_calls.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.generate(request)?;
        let mut entries = self.entries.write().unwrap();
        if !entries.contains_key(&key) {
            entries.insert(key.clone(), response.clone());
            self.pending.lock().unwrap().push(CacheRecord {
                key,
                request: request.clone(),
                response: response.clone(),
                timestamp: self.clock.now(),
            });
        }
        Ok(response)
    }
}

/// Serves responses recorded in a cache file; anything else is a miss.
#[derive(Debug)]
pub struct ReplayBackend {
    entries: HashMap<String, GenerationResponse>,
}

impl ReplayBackend {
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        if !path.exists() {
            return Err(GatewayError::Cache(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("replay file {} not found", path.display()),
            )));
        }
        Ok(Self {
            entries: load_records(path)?
                .into_iter()
                .map(|r| (r.key, r.response))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        self.entries
            .get(&request.cache_key())
            .cloned()
            .ok_or_else(|| GatewayError::ReplayMiss {
                tag: request.request_tag.clone(),
            })
    }
}
