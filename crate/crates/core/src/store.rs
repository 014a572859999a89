//! Run directories: corpus ingestion, the run manifest, append-only record
//! stores and the single-writer lock.
//!
//! Layout:
//!
//! ```text
//! <run>/manifest.json        run id, corpus hash, config snapshot, stage status
//! <run>/corpus.jsonl         canonical copy of the ingested corpus
//! <run>/samples.jsonl        AnswerSample
//! <run>/distributions.jsonl  AnswerDistribution
//! <run>/diagnoses.jsonl      DiagnosisEntry
//! <run>/interventions.jsonl  InterventionEntry
//! <run>/confidences.csv      ConfidenceRecord rows
//! <run>/cache.jsonl          provider response cache
//! <run>/*.csv, report.md     report artifacts
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::config::RunConfig;
use crate::diagnosis::DiagnosisEntry;
use crate::intervention::InterventionEntry;
use crate::jsonl::{self, JsonlError};
use crate::model::{validate_corpus, AnswerDistribution, AnswerSample, Question, ValidationIssue};

pub const MANIFEST: &str = "manifest.json";
pub const CORPUS: &str = "corpus.jsonl";
pub const SAMPLES: &str = "samples.jsonl";
pub const DISTRIBUTIONS: &str = "distributions.jsonl";
pub const DIAGNOSES: &str = "diagnoses.jsonl";
pub const INTERVENTIONS: &str = "interventions.jsonl";
pub const CONFIDENCES: &str = "confidences.csv";
pub const CACHE: &str = "cache.jsonl";
const LOCK: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: line {line}: {message}")]
    ParseError {
        path: String,
        line: usize,
        message: String,
    },
    #[error("corpus failed validation:\n{}", format_issues(.0))]
    ValidationFailed(Vec<ValidationIssue>),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{path}: manifest is unreadable: {message}")]
    ManifestCorrupt { path: String, message: String },
    #[error("requested config differs from the run's snapshot in: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
    #[error("corpus differs from the one this run was created with")]
    CorpusMismatch,
    #[error("stage {stage} needs {needs} to be done first")]
    StageOrderError { stage: Stage, needs: Stage },
    #[error("{0} is locked by another process (remove the .lock file if it is stale)")]
    RunLocked(String),
    #[error("no run at {0}")]
    NoRun(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn from_jsonl(e: JsonlError) -> StoreError {
    match e {
        JsonlError::Parse { path, line, source } => StoreError::ParseError {
            path,
            line,
            message: source.to_string(),
        },
        other => StoreError::Jsonl(other),
    }
}

/// Read a corpus in the canonical JSONL format and validate it.
pub fn ingest_corpus(path: &Path) -> Result<Vec<Question>, StoreError> {
    if !path.exists() {
        return Err(StoreError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let questions: Vec<Question> = jsonl::read(path).map_err(from_jsonl)?;
    if questions.is_empty() {
        return Err(StoreError::EmptyCorpus);
    }
    let issues = validate_corpus(&questions);
    if !issues.is_empty() {
        return Err(StoreError::ValidationFailed(issues));
    }
    Ok(questions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sample,
    Diagnose,
    Clarify,
    Inject,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Sample,
        Stage::Diagnose,
        Stage::Clarify,
        Stage::Inject,
        Stage::Report,
    ];

    /// The stage that must be done before this one can run.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Sample => None,
            Stage::Diagnose | Stage::Report => Some(Stage::Sample),
            Stage::Clarify | Stage::Inject => Some(Stage::Diagnose),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sample => "sample",
            Stage::Diagnose => "diagnose",
            Stage::Clarify => "clarify",
            Stage::Inject => "inject",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub corpus_hash: String,
    pub config: RunConfig,
    pub stage_status: BTreeMap<Stage, StageStatus>,
}

impl RunManifest {
    /// First stage, in pipeline order, that is not done.
    pub fn next_stage(&self) -> Option<Stage> {
        Stage::ALL
            .into_iter()
            .find(|s| self.status(*s) != StageStatus::Done)
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stage_status
            .get(&stage)
            .copied()
            .unwrap_or(StageStatus::Pending)
    }
}

/// Holds `<run>/.lock` for as long as it lives.
#[derive(Debug)]
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StoreError::RunLocked(dir.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn corpus_bytes(questions: &[Question]) -> Vec<u8> {
    let mut buf = Vec::new();
    for q in questions {
        serde_json::to_writer(&mut buf, q).expect("question serializes");
        buf.push(b'\n');
    }
    buf
}

pub fn corpus_hash(questions: &[Question]) -> String {
    hex::encode(Sha256::digest(corpus_bytes(questions)))
}

/// An open run directory with its writer lock held.
#[derive(Debug)]
pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
    _lock: RunLock,
}

impl RunStore {
    /// Create a run for `corpus`, or reopen the existing one at `dir` after
    /// checking that corpus and config match the snapshot.
    pub fn create(
        dir: &Path,
        corpus: &[Question],
        config: &RunConfig,
        clock: &Clock,
    ) -> Result<Self, StoreError> {
        if corpus.is_empty() {
            return Err(StoreError::EmptyCorpus);
        }
        if dir.join(MANIFEST).exists() {
            let store = Self::open(dir)?;
            if store.manifest.corpus_hash != corpus_hash(corpus) {
                return Err(StoreError::CorpusMismatch);
            }
            store.check_config(config)?;
            return Ok(store);
        }
        std::fs::create_dir_all(dir)?;
        let lock = RunLock::acquire(dir)?;
        let run_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        let manifest = RunManifest {
            run_id,
            created_at: clock.now(),
            corpus_hash: corpus_hash(corpus),
            config: config.clone(),
            stage_status: Stage::ALL
                .into_iter()
                .map(|s| (s, StageStatus::Pending))
                .collect(),
        };
        let tmp = dir.join(format!("{CORPUS}.tmp"));
        std::fs::write(&tmp, corpus_bytes(corpus))?;
        std::fs::rename(&tmp, dir.join(CORPUS))?;
        let store = Self {
            dir: dir.to_path_buf(),
            manifest,
            _lock: lock,
        };
        store.write_manifest()?;
        Ok(store)
    }

    /// Open an existing run.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(StoreError::NoRun(dir.display().to_string()));
        }
        let lock = RunLock::acquire(dir)?;
        let manifest: RunManifest =
            serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| {
                StoreError::ManifestCorrupt {
                    path: path.display().to_string(),
                    message: e.to_string(),
                }
            })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    pub fn check_config(&self, requested: &RunConfig) -> Result<(), StoreError> {
        let diff = self.manifest.config.semantic_diff(requested);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(StoreError::ConfigMismatch(diff))
        }
    }

    fn write_manifest(&self) -> Result<(), StoreError> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        let tmp = self.dir.join(format!("{MANIFEST}.tmp"));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, self.dir.join(MANIFEST))?;
        Ok(())
    }

    /// Error unless `stage`'s prerequisite is done.
    pub fn require(&self, stage: Stage) -> Result<(), StoreError> {
        match stage.prerequisite() {
            Some(needs) if self.manifest.status(needs) != StageStatus::Done => {
                Err(StoreError::StageOrderError { stage, needs })
            }
            _ => Ok(()),
        }
    }

    pub fn set_status(&mut self, stage: Stage, status: StageStatus) -> Result<(), StoreError> {
        self.manifest.stage_status.insert(stage, status);
        self.write_manifest()
    }

    pub fn corpus(&self) -> Result<Vec<Question>, StoreError> {
        self.read(CORPUS)
    }

    pub fn samples(&self) -> Result<Vec<AnswerSample>, StoreError> {
        self.read(SAMPLES)
    }

    pub fn distributions(&self) -> Result<Vec<AnswerDistribution>, StoreError> {
        self.read(DISTRIBUTIONS)
    }

    pub fn diagnoses(&self) -> Result<Vec<DiagnosisEntry>, StoreError> {
        self.read(DIAGNOSES)
    }

    pub fn interventions(&self) -> Result<Vec<InterventionEntry>, StoreError> {
        self.read(INTERVENTIONS)
    }

    pub fn read<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, StoreError> {
        jsonl::read(&self.path(name)).map_err(from_jsonl)
    }

    pub fn append<T: Serialize>(&self, name: &str, items: &[T]) -> Result<(), StoreError> {
        jsonl::append(&self.path(name), items).map_err(from_jsonl)
    }

    /// Write a report artifact atomically.
    pub fn write_artifact(&self, name: &str, contents: &str) -> Result<(), StoreError> {
        let tmp = self.dir.join(format!("{name}.tmp"));
        std::fs::write(&tmp, contents)?;
        std::fs::rename(&tmp, self.dir.join(name))?;
        Ok(())
    }
}
