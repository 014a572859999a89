//! Stage drivers over a run directory.
//!
//! Each stage works through its pending questions in chunks of
//! `concurrency`. A chunk's records are persisted together, in corpus order,
//! followed by the cache entries it produced. If any question in a chunk hits
//! a provider failure nothing from that chunk is kept, the stage is marked
//! failed, and a later invocation resumes from that chunk.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::calibration::{self, CalibrationError, CalibrationReport};
use crate::diagnosis::{self, label_histogram, DiagnosisEntry, DiagnosisError};
use crate::gateway::{Backend, CachedBackend, GatewayError, SearchBackend};
use crate::intervention::{self, InterventionEntry, InterventionError, StudyContext, StudyRow};
use crate::model::{
    AnswerDistribution, AnswerSample, ConfidenceMethod, ConfidenceRecord, InterventionKind,
    Question,
};
use crate::report::{self, ReportInput, StudySection, Table};
use crate::sampling::{self, SamplingError};
use crate::store::{self, RunStore, Stage, StageStatus, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("question {question_id}: {source}")]
    Sampling {
        question_id: String,
        #[source]
        source: SamplingError,
    },
    #[error("question {question_id}: {source}")]
    Diagnosis {
        question_id: String,
        #[source]
        source: DiagnosisError,
    },
    #[error("question {question_id}: {source}")]
    Intervention {
        question_id: String,
        #[source]
        source: InterventionError,
    },
    #[error(transparent)]
    DiagnosisSetup(DiagnosisError),
    #[error(transparent)]
    InterventionSetup(InterventionError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Report(#[from] report::ReportError),
    #[error("writing response cache: {0}")]
    Cache(GatewayError),
    #[error("building worker pool: {0}")]
    Pool(String),
}

impl PipelineError {
    /// The underlying gateway error, if this is a provider failure.
    pub fn gateway(&self) -> Option<&GatewayError> {
        match self {
            PipelineError::Sampling {
                source: SamplingError::Gateway(g),
                ..
            } => Some(g),
            PipelineError::Diagnosis {
                source: DiagnosisError::Gateway(g),
                ..
            } => Some(g),
            PipelineError::Intervention {
                source:
                    InterventionError::Gateway(g)
                    | InterventionError::Sampling(SamplingError::Gateway(g)),
                ..
            } => Some(g),
            _ => None,
        }
    }
}

/// Backend plus cache control for the stage drivers.
pub struct Services<'a, B> {
    pub backend: &'a CachedBackend<B>,
    pub search: &'a dyn SearchBackend,
}

fn pool(concurrency: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Run `chunks` of work; `work` returns the items to persist or an error.
/// Persisting and cache flushing happen after each successful chunk.
fn run_chunks<T, B, W, P>(
    store: &mut RunStore,
    stage: Stage,
    items: &[T],
    services: &Services<'_, B>,
    work: W,
    mut persist: P,
) -> Result<(), PipelineError>
where
    T: Sync,
    B: Backend,
    W: Fn(&[T]) -> Result<(), PipelineError> + Sync,
    P: FnMut(&RunStore) -> Result<(), PipelineError>,
{
    let concurrency = store.config().concurrency.max(1);
    let pool = pool(concurrency)?;
    for chunk in items.chunks(concurrency) {
        if let Err(e) = pool.install(|| work(chunk)) {
            services.backend.discard_pending();
            store.set_status(stage, StageStatus::Failed)?;
            return Err(e);
        }
        persist(store)?;
        services.backend.flush().map_err(PipelineError::Cache)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantifySummary {
    pub n_questions: usize,
    pub flagged: Vec<String>,
    pub mean_entropy: f64,
    pub newly_sampled: usize,
}

/// Sample every question lacking a stored distribution, then summarize.
pub fn quantify<B: Backend>(
    store: &mut RunStore,
    services: &Services<'_, B>,
) -> Result<QuantifySummary, PipelineError> {
    let corpus = store.corpus()?;
    let config = store.config().clone();
    let done: BTreeSet<String> = store
        .distributions()?
        .into_iter()
        .map(|d| d.question_id)
        .collect();
    let pending: Vec<&Question> = corpus.iter().filter(|q| !done.contains(&q.id)).collect();

    let results = std::sync::Mutex::new(Vec::new());
    run_chunks(
        store,
        Stage::Sample,
        &pending,
        services,
        |chunk| {
            let out = chunk
                .par_iter()
                .map(|q| {
                    let samples = sampling::sample_answers(q, &config.sampling, services.backend)?;
                    let dist =
                        sampling::build_distribution_in(&samples, config.sampling.entropy_base)?;
                    Ok((samples, dist))
                })
                .collect::<Vec<Result<(Vec<AnswerSample>, AnswerDistribution), SamplingError>>>();
            let mut ok = Vec::with_capacity(out.len());
            for (q, r) in chunk.iter().zip(out) {
                ok.push(r.map_err(|source| PipelineError::Sampling {
                    question_id: q.id.clone(),
                    source,
                })?);
            }
            *results.lock().unwrap() = ok;
            Ok(())
        },
        |store| {
            let batch = std::mem::take(&mut *results.lock().unwrap());
            let samples: Vec<AnswerSample> = batch.iter().flat_map(|(s, _)| s.clone()).collect();
            let dists: Vec<AnswerDistribution> = batch.into_iter().map(|(_, d)| d).collect();
            store.append(store::SAMPLES, &samples)?;
            store.append(store::DISTRIBUTIONS, &dists)?;
            Ok(())
        },
    )?;
    store.set_status(Stage::Sample, StageStatus::Done)?;

    let dists = store.distributions()?;
    let flagged =
        diagnosis::filter_high_uncertainty(&ordered(&corpus, dists.clone()), config.diagnosis.tau);
    let mean_entropy = if dists.is_empty() {
        0.0
    } else {
        dists.iter().map(|d| d.entropy).sum::<f64>() / dists.len() as f64
    };
    Ok(QuantifySummary {
        n_questions: corpus.len(),
        flagged,
        mean_entropy,
        newly_sampled: pending.len(),
    })
}

/// Distributions in corpus order.
fn ordered(corpus: &[Question], dists: Vec<AnswerDistribution>) -> Vec<AnswerDistribution> {
    let mut by_id: BTreeMap<String, AnswerDistribution> = dists
        .into_iter()
        .map(|d| (d.question_id.clone(), d))
        .collect();
    corpus.iter().filter_map(|q| by_id.remove(&q.id)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseSummary {
    pub n_flagged: usize,
    pub histogram: Vec<(crate::model::UncertaintyLabel, usize)>,
    pub failures: Vec<(String, String)>,
}

impl DiagnoseSummary {
    pub fn n_diagnosed(&self) -> usize {
        self.histogram.iter().map(|(_, n)| n).sum()
    }
}

pub fn diagnose<B: Backend>(
    store: &mut RunStore,
    services: &Services<'_, B>,
) -> Result<DiagnoseSummary, PipelineError> {
    store.require(Stage::Diagnose)?;
    let config = store.config().clone();
    config
        .diagnosis
        .validate()
        .map_err(PipelineError::DiagnosisSetup)?;
    let corpus = store.corpus()?;
    let dists = ordered(&corpus, store.distributions()?);
    let samples = store.samples()?;
    let done: BTreeSet<String> = store
        .diagnoses()?
        .iter()
        .map(|e| e.question_id().to_string())
        .collect();
    let flagged: BTreeSet<String> =
        diagnosis::filter_high_uncertainty(&dists, config.diagnosis.tau)
            .into_iter()
            .collect();
    let pending: Vec<Question> = corpus
        .iter()
        .filter(|q| flagged.contains(&q.id) && !done.contains(&q.id))
        .cloned()
        .collect();

    let entries = std::sync::Mutex::new(Vec::new());
    run_chunks(
        store,
        Stage::Diagnose,
        &pending,
        services,
        |chunk| {
            let outcomes = diagnosis::diagnose_corpus(
                chunk,
                &dists,
                &samples,
                &config.diagnosis,
                services.backend,
            )
            .map_err(PipelineError::DiagnosisSetup)?;
            let mut out = Vec::with_capacity(outcomes.len());
            for o in outcomes {
                match o.to_entry() {
                    Some(e) => out.push(e),
                    None => {
                        return Err(PipelineError::Diagnosis {
                            question_id: o.question_id,
                            source: o.result.expect_err("transient outcomes are errors"),
                        })
                    }
                }
            }
            *entries.lock().unwrap() = out;
            Ok(())
        },
        |store| {
            let batch = std::mem::take(&mut *entries.lock().unwrap());
            store.append(store::DIAGNOSES, &batch)?;
            Ok(())
        },
    )?;
    store.set_status(Stage::Diagnose, StageStatus::Done)?;

    let all = store.diagnoses()?;
    Ok(DiagnoseSummary {
        n_flagged: flagged.len(),
        histogram: label_histogram(all.iter().filter_map(DiagnosisEntry::record)),
        failures: all
            .iter()
            .filter_map(|e| match e {
                DiagnosisEntry::Failed { question_id, error } => {
                    Some((question_id.clone(), error.clone()))
                }
                _ => None,
            })
            .collect(),
    })
}

pub fn stage_for(kind: InterventionKind) -> Stage {
    match kind {
        InterventionKind::Clarification => Stage::Clarify,
        InterventionKind::KnowledgeInjection => Stage::Inject,
    }
}

pub fn csv_name(kind: InterventionKind) -> &'static str {
    match kind {
        InterventionKind::Clarification => report::CLARIFICATION_CSV,
        InterventionKind::KnowledgeInjection => report::INJECTION_CSV,
    }
}

#[derive(Debug, Clone)]
pub struct StudySummary {
    pub kind: InterventionKind,
    pub rows: Vec<StudyRow>,
    pub table: Table,
    pub n_eligible: usize,
    pub failures: Vec<(String, String)>,
    /// Flagged questions left out because their diagnosis failed to parse.
    pub excluded: usize,
}

fn study_table(kind: InterventionKind, rows: &[StudyRow], model: &str) -> Table {
    match kind {
        InterventionKind::Clarification => report::clarification_table(rows, model),
        InterventionKind::KnowledgeInjection => report::injection_table(rows, model),
    }
}

/// Aggregate stored results of one study.
pub fn study_summary(
    store: &RunStore,
    kind: InterventionKind,
) -> Result<StudySummary, PipelineError> {
    let corpus = store.corpus()?;
    let diagnoses = store.diagnoses()?;
    let entries: Vec<InterventionEntry> = store
        .interventions()?
        .into_iter()
        .filter(|e| e.key().1 == kind)
        .collect();
    let results: Vec<_> = entries.iter().filter_map(|e| e.result().cloned()).collect();
    let rows = intervention::aggregate(&results, &corpus, kind == InterventionKind::Clarification);
    let table = study_table(kind, &rows, &store.config().sampling.target_model);
    Ok(StudySummary {
        kind,
        n_eligible: intervention::eligible(&corpus, &diagnoses, kind).len(),
        failures: entries
            .iter()
            .filter_map(|e| match e {
                InterventionEntry::Failed {
                    question_id, error, ..
                } => Some((question_id.clone(), error.clone())),
                _ => None,
            })
            .collect(),
        excluded: diagnoses
            .iter()
            .filter(|d| matches!(d, DiagnosisEntry::Failed { .. }))
            .count(),
        rows,
        table,
    })
}

/// Run the clarification or injection study and write its CSV.
pub fn validate<B: Backend>(
    store: &mut RunStore,
    services: &Services<'_, B>,
    kind: InterventionKind,
) -> Result<StudySummary, PipelineError> {
    let stage = stage_for(kind);
    store.require(stage)?;
    let config = store.config().clone();
    config
        .intervention
        .validate()
        .map_err(PipelineError::InterventionSetup)?;
    let corpus = store.corpus()?;
    let dists = store.distributions()?;
    let samples = store.samples()?;
    let diagnoses = store.diagnoses()?;
    let done: BTreeSet<String> = store
        .interventions()?
        .iter()
        .filter(|e| e.key().1 == kind)
        .map(|e| e.key().0.to_string())
        .collect();
    let pending: Vec<Question> = intervention::eligible(&corpus, &diagnoses, kind)
        .into_iter()
        .filter(|r| !done.contains(r.question_id()))
        .filter_map(|r| corpus.iter().find(|q| q.id == r.question_id()).cloned())
        .collect();

    let ctx = StudyContext {
        sampling: &config.sampling,
        intervention: &config.intervention,
        auxiliary_model: &config.diagnosis.auxiliary_model,
        backend: services.backend,
        search: services.search,
    };
    let entries = std::sync::Mutex::new(Vec::new());
    run_chunks(
        store,
        stage,
        &pending,
        services,
        |chunk| {
            let outcomes = intervention::run_study(kind, chunk, &dists, &samples, &diagnoses, &ctx)
                .map_err(PipelineError::InterventionSetup)?;
            let mut out = Vec::with_capacity(outcomes.len());
            for o in outcomes {
                match o.to_entry() {
                    Some(e) => out.push(e),
                    None => {
                        return Err(PipelineError::Intervention {
                            question_id: o.question_id,
                            source: o.result.expect_err("transient outcomes are errors"),
                        })
                    }
                }
            }
            *entries.lock().unwrap() = out;
            Ok(())
        },
        |store| {
            let batch = std::mem::take(&mut *entries.lock().unwrap());
            store.append(store::INTERVENTIONS, &batch)?;
            Ok(())
        },
    )?;
    store.set_status(stage, StageStatus::Done)?;
    let summary = study_summary(store, kind)?;
    store.write_artifact(csv_name(kind), &summary.table.to_csv())?;
    Ok(summary)
}

/// Confidence records derived from a run: SC from each distribution, PPL
/// from the token likelihoods of the first sample giving the majority answer
/// (when stored), and optionally VERB by asking the target model about that
/// same sample. Questions without a gold answer are skipped.
pub fn collect_confidences<B: Backend>(
    store: &RunStore,
    services: &Services<'_, B>,
    with_verbalization: bool,
) -> Result<Vec<ConfidenceRecord>, PipelineError> {
    store.require(Stage::Diagnose)?;
    let config = store.config().clone();
    let corpus = store.corpus()?;
    let dists: BTreeMap<String, AnswerDistribution> = store
        .distributions()?
        .into_iter()
        .map(|d| (d.question_id.clone(), d))
        .collect();
    let mut samples: BTreeMap<String, Vec<AnswerSample>> = BTreeMap::new();
    for s in store.samples()? {
        samples.entry(s.question_id.clone()).or_default().push(s);
    }

    let mut records = Vec::new();
    let mut verbalize = Vec::new();
    for q in &corpus {
        let Some(dist) = dists.get(&q.id) else {
            continue;
        };
        let Some(correct) = config.sampling.is_correct(&dist.majority_answer, q) else {
            continue;
        };
        let record = |method, confidence| ConfidenceRecord {
            question_id: q.id.clone(),
            method,
            confidence,
            correct,
        };
        records.push(record(
            ConfidenceMethod::SelfConsistency,
            sampling::self_consistency_confidence(dist),
        ));
        let mut qs = samples.get(&q.id).cloned().unwrap_or_default();
        qs.sort_by_key(|s| s.sample_index);
        let Some(rep) = qs
            .into_iter()
            .find(|s| s.extracted_answer == dist.majority_answer)
        else {
            continue;
        };
        if let Some(lik) = &rep.provider_meta.token_likelihoods {
            if let Ok(c) = sampling::perplexity_confidence(lik) {
                records.push(record(ConfidenceMethod::Perplexity, c));
            }
        }
        if with_verbalization {
            verbalize.push((q, rep, correct));
        }
    }

    if !verbalize.is_empty() {
        let pool = pool(config.concurrency)?;
        let verb: Vec<Result<ConfidenceRecord, PipelineError>> = pool.install(|| {
            verbalize
                .par_iter()
                .map(|(q, rep, correct)| {
                    let c = sampling::verbalized_confidence(
                        q,
                        rep,
                        &config.sampling.target_model,
                        services.backend,
                    );
                    match c {
                        Ok(confidence) => Ok(ConfidenceRecord {
                            question_id: q.id.clone(),
                            method: ConfidenceMethod::Verbalization,
                            confidence,
                            correct: *correct,
                        }),
                        Err(source) => Err(PipelineError::Sampling {
                            question_id: q.id.clone(),
                            source,
                        }),
                    }
                })
                .collect()
        });
        let mut ok = Vec::new();
        for r in verb {
            match r {
                Ok(rec) => ok.push(rec),
                Err(e) if e.gateway().is_some() => {
                    services.backend.discard_pending();
                    return Err(e);
                }
                Err(e) => tracing::warn!(error = %e, "skipping unparseable verbalized confidence"),
            }
        }
        records.extend(ok);
        services.backend.flush().map_err(PipelineError::Cache)?;
    }
    Ok(records)
}

/// Per-method metrics for `records`, written to `calibration.csv` in the run
/// when one is given. Methods whose metrics are undefined are reported as
/// warnings and left out.
pub fn calibrate(
    records: &[ConfidenceRecord],
    bins: usize,
) -> (
    Vec<CalibrationReport>,
    Vec<(ConfidenceMethod, CalibrationError)>,
) {
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for method in ConfidenceMethod::ALL {
        let subset: Vec<ConfidenceRecord> = records
            .iter()
            .filter(|r| r.method == method)
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        match calibration::report(method, &subset, bins) {
            Ok(r) => reports.push(r),
            Err(e) => errors.push((method, e)),
        }
    }
    (reports, errors)
}

/// Assemble `report.md` (and refresh study CSVs) from what the run holds.
pub fn report(store: &mut RunStore) -> Result<String, PipelineError> {
    store.require(Stage::Report)?;
    let config = store.config().clone();
    let corpus = store.corpus()?;
    let dists = ordered(&corpus, store.distributions()?);
    let diagnoses = store.diagnoses()?;

    let study = |kind: InterventionKind| -> Result<Option<StudySection>, PipelineError> {
        if store.manifest().status(stage_for(kind)) != StageStatus::Done {
            return Ok(None);
        }
        let s = study_summary(store, kind)?;
        store.write_artifact(csv_name(kind), &s.table.to_csv())?;
        Ok(Some(StudySection {
            table: s.table,
            failures: s.failures.len(),
            excluded: s.excluded,
        }))
    };
    let clarification = study(InterventionKind::Clarification)?;
    let injection = study(InterventionKind::KnowledgeInjection)?;

    let calibration = {
        let path = store.path(report::CALIBRATION_CSV);
        if path.exists() {
            Some(Table::from_csv(
                &std::fs::read_to_string(path).map_err(StoreError::from)?,
            )?)
        } else {
            None
        }
    };

    let input = ReportInput {
        run_id: store.manifest().run_id.clone(),
        target_model: config.sampling.target_model.clone(),
        auxiliary_model: config.diagnosis.auxiliary_model.clone(),
        n_samples: config.sampling.n_samples,
        tau: config.diagnosis.tau,
        n_questions: corpus.len(),
        entropies: dists.iter().map(|d| d.entropy).collect(),
        n_flagged: diagnosis::filter_high_uncertainty(&dists, config.diagnosis.tau).len(),
        label_counts: label_histogram(diagnoses.iter().filter_map(DiagnosisEntry::record)),
        diagnosis_failures: diagnoses
            .iter()
            .filter(|d| matches!(d, DiagnosisEntry::Failed { .. }))
            .count(),
        clarification,
        injection,
        calibration,
    };
    let md = report::render_markdown(&input);
    store.write_artifact(report::REPORT_MD, &md)?;
    store.set_status(Stage::Report, StageStatus::Done)?;
    Ok(md)
}
