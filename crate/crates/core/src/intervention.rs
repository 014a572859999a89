//! Validation interventions: question clarification, and knowledge
//! acquisition plus context injection, each followed by re-sampling.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnosis::DiagnosisEntry;
use crate::gateway::{
    self, web_search, Backend, GatewayError, GenerationRequest, Message, SearchBackend,
};
use crate::model::{
    AnswerDistribution, AnswerSample, DiagnosisRecord, InterventionKind, InterventionResult,
    Question, UncertaintyLabel,
};
use crate::prompts::{self, PromptTemplate, TemplateError};
use crate::sampling::{self, SamplingConfig, SamplingError};

#[derive(Debug, thiserror::Error)]
pub enum InterventionError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("question {0} has empty text")]
    EmptyQuestion(String),
    #[error("knowledge gap for {0} is empty")]
    EmptyGap(String),
    #[error("injected context for {0} is empty")]
    EmptyContext(String),
    #[error("no distribution stored for question {0}")]
    MissingDistribution(String),
}

impl InterventionError {
    /// Provider-side failures, retried on resume instead of recorded.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            InterventionError::Gateway(_) | InterventionError::Sampling(SamplingError::Gateway(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KnowledgeSource {
    #[default]
    WebSearch,
    PromptSynthesis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InjectionLayout {
    /// Passage under a `Context:` header, before the question.
    #[default]
    PrependContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    pub clarification_prompt_template: PromptTemplate,
    pub synthesis_prompt_template: PromptTemplate,
    pub knowledge_source: KnowledgeSource,
    /// Fall back to synthesis when web search is unavailable.
    pub search_fallback: bool,
    pub injection_layout: InjectionLayout,
    pub passage_char_budget: usize,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            clarification_prompt_template: PromptTemplate::new(prompts::CLARIFICATION_TEMPLATE),
            synthesis_prompt_template: PromptTemplate::new(prompts::SYNTHESIS_TEMPLATE),
            knowledge_source: KnowledgeSource::WebSearch,
            search_fallback: true,
            injection_layout: InjectionLayout::PrependContext,
            passage_char_budget: 2000,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<(), InterventionError> {
        self.clarification_prompt_template.require(&["question"])?;
        self.synthesis_prompt_template.require(&["knowledge"])?;
        Ok(())
    }
}

/// Everything an intervention needs to call out to models.
#[derive(Clone, Copy)]
pub struct StudyContext<'a> {
    pub sampling: &'a SamplingConfig,
    pub intervention: &'a InterventionConfig,
    pub auxiliary_model: &'a str,
    pub backend: &'a dyn Backend,
    pub search: &'a dyn SearchBackend,
}

const CLARIFIED_PREFIXES: [&str; 3] = ["clarified question:", "clarified:", "question:"];

fn strip_clarified_prefix(reply: &str) -> &str {
    let t = reply.trim();
    for p in CLARIFIED_PREFIXES {
        if t.len() >= p.len() && t.is_char_boundary(p.len()) && t[..p.len()].eq_ignore_ascii_case(p)
        {
            return t[p.len()..].trim();
        }
    }
    t
}

/// Rewrite `question` to resolve ambiguities. The result keeps the id and
/// choices with `revision` bumped; an empty reply leaves the text unchanged.
pub fn clarify_question(
    question: &Question,
    config: &InterventionConfig,
    auxiliary_model: &str,
    backend: &dyn Backend,
) -> Result<Question, InterventionError> {
    if question.text.trim().is_empty() {
        return Err(InterventionError::EmptyQuestion(question.id.clone()));
    }
    let prompt = config
        .clarification_prompt_template
        .render(&[("question", question.text.trim())]);
    let request = GenerationRequest::new(
        auxiliary_model,
        vec![Message::user(prompt)],
        format!("{}#clarify", question.id),
    )
    .temperature(0.0);
    let reply = gateway::generate(backend, &request)?.text;
    let text = strip_clarified_prefix(&reply);
    let mut clarified = question.clone();
    if !text.is_empty() {
        clarified.text = text.to_string();
    }
    clarified.revision += 1;
    Ok(clarified)
}

/// Where an injected passage came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnowledgeOrigin {
    Search,
    Synthesis,
}

fn synthesize(
    question_id: &str,
    gap: &str,
    config: &InterventionConfig,
    auxiliary_model: &str,
    backend: &dyn Backend,
) -> Result<String, InterventionError> {
    let prompt = config
        .synthesis_prompt_template
        .render(&[("knowledge", gap)]);
    let request = GenerationRequest::new(
        auxiliary_model,
        vec![Message::user(prompt)],
        format!("{question_id}#synthesize"),
    )
    .temperature(0.0);
    Ok(gateway::generate(backend, &request)?.text)
}

/// A passage explaining `gap`, truncated to the configured budget.
pub fn acquire_knowledge(
    question_id: &str,
    gap: &str,
    ctx: &StudyContext<'_>,
) -> Result<(String, KnowledgeOrigin), InterventionError> {
    let gap = gap.trim();
    if gap.is_empty() {
        return Err(InterventionError::EmptyGap(question_id.to_string()));
    }
    let cfg = ctx.intervention;
    let (passage, origin) = match cfg.knowledge_source {
        KnowledgeSource::WebSearch => match web_search(ctx.search, gap) {
            Ok(p) => (p, KnowledgeOrigin::Search),
            Err(GatewayError::SearchUnavailable(reason)) if cfg.search_fallback => {
                tracing::info!(question_id, %reason, "search unavailable, synthesizing");
                (
                    synthesize(question_id, gap, cfg, ctx.auxiliary_model, ctx.backend)?,
                    KnowledgeOrigin::Synthesis,
                )
            }
            Err(e) => return Err(e.into()),
        },
        KnowledgeSource::PromptSynthesis => (
            synthesize(question_id, gap, cfg, ctx.auxiliary_model, ctx.backend)?,
            KnowledgeOrigin::Synthesis,
        ),
    };
    let passage = prompts::truncate_chars(passage.trim(), cfg.passage_char_budget).to_string();
    Ok((passage, origin))
}

/// Fresh samples for a (possibly modified) question.
#[derive(Debug, Clone)]
pub struct Reevaluation {
    pub samples: Vec<AnswerSample>,
    pub distribution: AnswerDistribution,
    /// Majority-vote correctness, when a gold answer exists.
    pub accuracy: Option<f64>,
    pub sample_accuracy: Option<f64>,
}

fn reevaluate(
    question: &Question,
    context: Option<&str>,
    tag_base: &str,
    config: &SamplingConfig,
    backend: &dyn Backend,
) -> Result<Reevaluation, InterventionError> {
    let samples = sampling::sample_with_context(question, context, tag_base, config, backend)?;
    let distribution = sampling::build_distribution_in(&samples, config.entropy_base)?;
    Ok(Reevaluation {
        accuracy: sampling::majority_accuracy(&distribution, question, config),
        sample_accuracy: sampling::sample_accuracy(&samples, question, config),
        samples,
        distribution,
    })
}

/// Re-sample `question` with `context` prepended.
pub fn inject_and_reevaluate(
    question: &Question,
    context: &str,
    config: &SamplingConfig,
    backend: &dyn Backend,
) -> Result<Reevaluation, InterventionError> {
    if context.trim().is_empty() {
        return Err(InterventionError::EmptyContext(question.id.clone()));
    }
    reevaluate(
        question,
        Some(context),
        &format!("{}#injected", question.id),
        config,
        backend,
    )
}

/// Relative uncertainty reduction in percent; 0 when there was none to reduce.
pub fn unc_reduction_rate(unc_before: f64, unc_after: f64) -> f64 {
    if unc_before == 0.0 {
        0.0
    } else {
        100.0 * (unc_before - unc_after) / unc_before
    }
}

/// Accuracy change in percentage points, from fractional accuracies.
pub fn acc_improvement_rate(acc_before: f64, acc_after: f64) -> f64 {
    100.0 * (acc_after - acc_before)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionMetrics {
    pub unc_reduction: f64,
    pub unc_reduction_rate: f64,
    pub acc_improvement_rate: Option<f64>,
}

pub fn reduction_metrics(
    before: (f64, Option<f64>),
    after: (f64, Option<f64>),
) -> ReductionMetrics {
    ReductionMetrics {
        unc_reduction: before.0 - after.0,
        unc_reduction_rate: unc_reduction_rate(before.0, after.0),
        acc_improvement_rate: match (before.1, after.1) {
            (Some(b), Some(a)) => Some(acc_improvement_rate(b, a)),
            _ => None,
        },
    }
}

/// Per-question study result.
#[derive(Debug)]
pub struct InterventionOutcome {
    pub question_id: String,
    pub kind: InterventionKind,
    pub result: Result<InterventionResult, InterventionError>,
}

/// Persisted form of an intervention outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InterventionEntry {
    Done {
        result: InterventionResult,
    },
    Failed {
        question_id: String,
        kind: InterventionKind,
        error: String,
    },
}

impl InterventionEntry {
    pub fn key(&self) -> (&str, InterventionKind) {
        match self {
            InterventionEntry::Done { result } => (&result.question_id, result.kind),
            InterventionEntry::Failed {
                question_id, kind, ..
            } => (question_id, *kind),
        }
    }

    pub fn result(&self) -> Option<&InterventionResult> {
        match self {
            InterventionEntry::Done { result } => Some(result),
            InterventionEntry::Failed { .. } => None,
        }
    }
}

impl InterventionOutcome {
    /// The entry to persist, or `None` for transient provider failures.
    pub fn to_entry(&self) -> Option<InterventionEntry> {
        match &self.result {
            Ok(result) => Some(InterventionEntry::Done {
                result: result.clone(),
            }),
            Err(e) if e.is_transient() => None,
            Err(e) => Some(InterventionEntry::Failed {
                question_id: self.question_id.clone(),
                kind: self.kind,
                error: e.to_string(),
            }),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn result_from(
    question: &Question,
    kind: InterventionKind,
    label: UncertaintyLabel,
    modified_context: String,
    before: &AnswerDistribution,
    sample_acc_before: Option<f64>,
    after: &Reevaluation,
    config: &SamplingConfig,
) -> InterventionResult {
    let acc_before = sampling::majority_accuracy(before, question, config);
    let m = reduction_metrics(
        (before.entropy, acc_before),
        (after.distribution.entropy, after.accuracy),
    );
    InterventionResult {
        question_id: question.id.clone(),
        kind,
        label,
        modified_context,
        unc_before: before.entropy,
        unc_after: after.distribution.entropy,
        acc_before,
        acc_after: after.accuracy,
        sample_acc_before,
        sample_acc_after: after.sample_accuracy,
        unc_reduction_rate: m.unc_reduction_rate,
        acc_improvement_rate: m.acc_improvement_rate,
    }
}

/// Stored baseline for one question.
#[derive(Debug, Clone, Copy)]
pub struct Baseline<'a> {
    pub question: &'a Question,
    pub distribution: &'a AnswerDistribution,
    pub samples: &'a [AnswerSample],
}

pub fn clarify_one(
    base: Baseline<'_>,
    record: &DiagnosisRecord,
    ctx: &StudyContext<'_>,
) -> Result<InterventionResult, InterventionError> {
    let clarified = clarify_question(
        base.question,
        ctx.intervention,
        ctx.auxiliary_model,
        ctx.backend,
    )?;
    let after = reevaluate(
        &clarified,
        None,
        &format!("{}#clarified", base.question.id),
        ctx.sampling,
        ctx.backend,
    )?;
    Ok(result_from(
        base.question,
        InterventionKind::Clarification,
        record.label(),
        clarified.text.clone(),
        base.distribution,
        sampling::sample_accuracy(base.samples, base.question, ctx.sampling),
        &after,
        ctx.sampling,
    ))
}

pub fn inject_one(
    base: Baseline<'_>,
    record: &DiagnosisRecord,
    ctx: &StudyContext<'_>,
) -> Result<InterventionResult, InterventionError> {
    let gap = record.knowledge_gap().unwrap_or_default();
    let (passage, _) = acquire_knowledge(&base.question.id, gap, ctx)?;
    let after = inject_and_reevaluate(base.question, &passage, ctx.sampling, ctx.backend)?;
    Ok(result_from(
        base.question,
        InterventionKind::KnowledgeInjection,
        record.label(),
        passage,
        base.distribution,
        sampling::sample_accuracy(base.samples, base.question, ctx.sampling),
        &after,
        ctx.sampling,
    ))
}

/// Diagnosed records eligible for a study, in corpus order.
pub fn eligible<'a>(
    questions: &[Question],
    diagnoses: &'a [DiagnosisEntry],
    kind: InterventionKind,
) -> Vec<&'a DiagnosisRecord> {
    let by_id: BTreeMap<&str, &DiagnosisRecord> = diagnoses
        .iter()
        .filter_map(DiagnosisEntry::record)
        .map(|r| (r.question_id(), r))
        .collect();
    questions
        .iter()
        .filter_map(|q| by_id.get(q.id.as_str()).copied())
        .filter(|r| match kind {
            InterventionKind::Clarification => true,
            InterventionKind::KnowledgeInjection => r.label().needs_knowledge(),
        })
        .collect()
}

/// Run one study over the eligible records. Per-question failures are
/// returned in place; output follows corpus order.
pub fn run_study(
    kind: InterventionKind,
    questions: &[Question],
    dists: &[AnswerDistribution],
    samples: &[AnswerSample],
    diagnoses: &[DiagnosisEntry],
    ctx: &StudyContext<'_>,
) -> Result<Vec<InterventionOutcome>, InterventionError> {
    ctx.intervention.validate()?;
    ctx.sampling.validate()?;
    let qs: BTreeMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let ds: BTreeMap<&str, &AnswerDistribution> =
        dists.iter().map(|d| (d.question_id.as_str(), d)).collect();
    let mut ss: BTreeMap<&str, Vec<AnswerSample>> = BTreeMap::new();
    for s in samples {
        ss.entry(s.question_id.as_str())
            .or_default()
            .push(s.clone());
    }

    let records = eligible(questions, diagnoses, kind);
    let mut work = Vec::with_capacity(records.len());
    for r in records {
        let id = r.question_id();
        let dist = ds
            .get(id)
            .ok_or_else(|| InterventionError::MissingDistribution(id.to_string()))?;
        work.push((
            r,
            qs[id],
            *dist,
            ss.get(id).map(Vec::as_slice).unwrap_or(&[]),
        ));
    }

    Ok(work
        .par_iter()
        .map(|&(record, question, distribution, samples)| {
            let base = Baseline {
                question,
                distribution,
                samples,
            };
            let result = match kind {
                InterventionKind::Clarification => clarify_one(base, record, ctx),
                InterventionKind::KnowledgeInjection => inject_one(base, record, ctx),
            };
            InterventionOutcome {
                question_id: question.id.clone(),
                kind,
                result,
            }
        })
        .collect())
}

pub fn run_clarification_study(
    questions: &[Question],
    dists: &[AnswerDistribution],
    samples: &[AnswerSample],
    diagnoses: &[DiagnosisEntry],
    ctx: &StudyContext<'_>,
) -> Result<Vec<InterventionOutcome>, InterventionError> {
    run_study(
        InterventionKind::Clarification,
        questions,
        dists,
        samples,
        diagnoses,
        ctx,
    )
}

pub fn run_injection_study(
    questions: &[Question],
    dists: &[AnswerDistribution],
    samples: &[AnswerSample],
    diagnoses: &[DiagnosisEntry],
    ctx: &StudyContext<'_>,
) -> Result<Vec<InterventionOutcome>, InterventionError> {
    run_study(
        InterventionKind::KnowledgeInjection,
        questions,
        dists,
        samples,
        diagnoses,
        ctx,
    )
}

/// Aggregated study row: means over one dataset (and, for clarification,
/// one label). Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub dataset: String,
    pub label: Option<UncertaintyLabel>,
    pub n: usize,
    pub unc_before: f64,
    pub unc_after: f64,
    pub acc_before: Option<f64>,
    pub acc_after: Option<f64>,
    pub unc_reduction_rate: f64,
    pub acc_improvement_rate: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Group results of one kind by dataset (first-seen corpus order) and, when
/// `by_label`, by label in report order. Accuracy means only count
/// questions with a gold answer.
pub fn aggregate(
    results: &[InterventionResult],
    questions: &[Question],
    by_label: bool,
) -> Vec<StudyRow> {
    let dataset_of: BTreeMap<&str, &str> = questions
        .iter()
        .map(|q| (q.id.as_str(), q.dataset_tag.as_str()))
        .collect();
    let mut datasets: Vec<&str> = Vec::new();
    for q in questions {
        if !datasets.contains(&q.dataset_tag.as_str()) {
            datasets.push(&q.dataset_tag);
        }
    }
    let labels: Vec<Option<UncertaintyLabel>> = if by_label {
        UncertaintyLabel::REPORT_ORDER
            .into_iter()
            .map(Some)
            .collect()
    } else {
        vec![None]
    };

    let mut rows = Vec::new();
    for ds in datasets {
        for &label in &labels {
            let group: Vec<&InterventionResult> = results
                .iter()
                .filter(|r| dataset_of.get(r.question_id.as_str()) == Some(&ds))
                .filter(|r| label.is_none_or(|l| r.label == l))
                .collect();
            if group.is_empty() {
                continue;
            }
            let unc_before = mean(group.iter().map(|r| r.unc_before)).unwrap_or(0.0);
            let unc_after = mean(group.iter().map(|r| r.unc_after)).unwrap_or(0.0);
            let graded: Vec<_> = group
                .iter()
                .filter_map(|r| Some((r.acc_before?, r.acc_after?)))
                .collect();
            let acc_before = mean(graded.iter().map(|g| 100.0 * g.0));
            let acc_after = mean(graded.iter().map(|g| 100.0 * g.1));
            rows.push(StudyRow {
                dataset: ds.to_string(),
                label,
                n: group.len(),
                unc_before,
                unc_after,
                acc_before,
                acc_after,
                unc_reduction_rate: unc_reduction_rate(unc_before, unc_after),
                acc_improvement_rate: acc_before.zip(acc_after).map(|(b, a)| a - b),
            });
        }
    }
    rows
}
