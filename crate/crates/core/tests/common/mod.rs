#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use uqdiag_core::clock::Clock;
use uqdiag_core::gateway::{
    Backend, CachedBackend, GatewayError, GenerationRequest, GenerationResponse, ScriptedBackend,
    SearchBackend,
};
use uqdiag_core::model::InterventionKind;
use uqdiag_core::pipeline::{self, PipelineError, Services};
use uqdiag_core::store::{self, ingest_corpus, RunStore};
use uqdiag_core::RunConfig;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn corpus_path() -> PathBuf {
    fixtures().join("corpus.jsonl")
}

pub fn scripted() -> ScriptedBackend {
    ScriptedBackend::from_file(&fixtures().join("scripted.json")).expect("fixture loads")
}

pub fn config() -> RunConfig {
    RunConfig {
        concurrency: 2,
        ..RunConfig::default()
    }
}

/// Passes calls through until `limit` have been made, then fails them all.
pub struct FailAfter<B> {
    pub inner: B,
    pub limit: usize,
    pub seen: AtomicUsize,
}

impl<B> FailAfter<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            limit,
            seen: AtomicUsize::new(0),
        }
    }
}

impl<B: Backend> Backend for FailAfter<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        if self.seen.fetch_add(1, Ordering::SeqCst) >= self.limit {
            return Err(GatewayError::ProviderUnavailable {
                attempts: 1,
                message: "simulated outage".into(),
            });
        }
        self.inner.generate(request)
    }
}

/// quantify, diagnose, both studies, report. Returns provider calls made.
pub fn full_pipeline<B: Backend>(
    dir: &Path,
    inner: B,
    search: &dyn SearchBackend,
) -> Result<usize, PipelineError> {
    let corpus = ingest_corpus(&corpus_path())?;
    let mut store = RunStore::create(dir, &corpus, &config(), &Clock::fixed_epoch())?;
    let backend = CachedBackend::open(inner, store.path(store::CACHE), Clock::fixed_epoch())
        .map_err(PipelineError::Cache)?;
    let services = Services {
        backend: &backend,
        search,
    };
    pipeline::quantify(&mut store, &services)?;
    pipeline::diagnose(&mut store, &services)?;
    pipeline::validate(&mut store, &services, InterventionKind::Clarification)?;
    pipeline::validate(&mut store, &services, InterventionKind::KnowledgeInjection)?;
    pipeline::report(&mut store)?;
    Ok(backend.provider_calls())
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Names of files that differ between two snapshots.
pub fn diff(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut names: Vec<&String> = a.keys().chain(b.keys()).collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .filter(|n| a.get(*n) != b.get(*n))
        .cloned()
        .collect()
}
