//! High-uncertainty filtering and the two-step auxiliary-model diagnosis:
//! uncertainty attribution, then knowledge-gap extraction for questions whose
//! label involves missing knowledge.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{self, Backend, GatewayError, GenerationRequest, Message};
use crate::model::{
    AnswerDistribution, AnswerSample, DiagnosisRecord, DiagnosisRecordError, Question,
    UncertaintyLabel,
};
use crate::prompts::{self, PromptTemplate, TemplateError};

pub const DEFAULT_TAU: f64 = 0.89;

const REASK: &str = "Your reply did not state a label. Answer with exactly one of: \
Question Ambiguity, Knowledge Gaps, Both. Finish with a line of the form \
\"Label: <label>\".";

#[derive(Debug, thiserror::Error)]
pub enum DiagnosisError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no label found in auxiliary reply after {attempts} attempts: {reply:?}")]
    LabelUnparseable { attempts: u32, reply: String },
    #[error("no 'Missing Knowledge:' line in auxiliary reply: {0:?}")]
    ExtractionUnparseable(String),
    #[error("no samples stored for question {0}")]
    MissingSamples(String),
    #[error("no distribution stored for question {0}")]
    MissingDistribution(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid diagnosis config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Record(#[from] DiagnosisRecordError),
}

impl DiagnosisError {
    /// Provider-side failures; the question should be retried on resume
    /// rather than recorded as failed.
    pub fn is_transient(&self) -> bool {
        matches!(self, DiagnosisError::Gateway(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosisConfig {
    pub tau: f64,
    pub auxiliary_model: String,
    pub attribution_prompt_template: PromptTemplate,
    pub extraction_prompt_template: PromptTemplate,
    /// Re-asks after the first unparseable attribution reply.
    pub max_label_retries: u32,
    /// Per-response character budget when embedding answers in prompts.
    pub response_char_budget: usize,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            auxiliary_model: "gpt-4o".into(),
            attribution_prompt_template: PromptTemplate::new(prompts::ATTRIBUTION_TEMPLATE),
            extraction_prompt_template: PromptTemplate::new(prompts::EXTRACTION_TEMPLATE),
            max_label_retries: 2,
            response_char_budget: 1500,
        }
    }
}

impl DiagnosisConfig {
    pub fn validate(&self) -> Result<(), DiagnosisError> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(DiagnosisError::InvalidConfig(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        self.attribution_prompt_template
            .require(&["question", "answers"])?;
        self.extraction_prompt_template
            .require(&["question", "answers"])?;
        Ok(())
    }

    fn render(
        &self,
        template: &PromptTemplate,
        question: &Question,
        samples: &[AnswerSample],
    ) -> String {
        let answers = prompts::format_answers(
            samples.iter().map(|s| s.raw_text.as_str()),
            self.response_char_budget,
        );
        template.render(&[
            ("n", &samples.len().to_string()),
            ("question", &prompts::question_block(question)),
            ("answers", &answers),
        ])
    }
}

/// Ids of distributions with entropy strictly above `tau`, in input order.
pub fn filter_high_uncertainty(dists: &[AnswerDistribution], tau: f64) -> Vec<String> {
    dists
        .iter()
        .filter(|d| d.entropy > tau)
        .map(|d| d.question_id.clone())
        .collect()
}

static LABEL_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[\s*#>]*label\s*\**\s*[:：]\s*(.+)$").unwrap());
static BOTH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bboth\b").unwrap());
static AMBIGUITY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)question\s+ambiguity").unwrap());
static GAPS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)knowledge\s+gaps?").unwrap());
static MISSING_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^[\s*#>-]*missing\s+knowledge\s*\**\s*[:：]\s*\**(.*)$").unwrap()
});

fn label_in(text: &str) -> Option<UncertaintyLabel> {
    if BOTH.is_match(text) {
        return Some(UncertaintyLabel::Both);
    }
    let amb = AMBIGUITY.find(text).map(|m| m.start());
    let gap = GAPS.find(text).map(|m| m.start());
    match (amb, gap) {
        (Some(a), Some(g)) if g < a => Some(UncertaintyLabel::KnowledgeGaps),
        (Some(_), _) => Some(UncertaintyLabel::QuestionAmbiguity),
        (None, Some(_)) => Some(UncertaintyLabel::KnowledgeGaps),
        (None, None) => None,
    }
}

/// Label stated in an attribution reply. A `Label:` line takes precedence
/// (the last one, if several); otherwise the whole reply is scanned with
/// "both" checked first and then the earliest of the other two labels.
pub fn parse_label(reply: &str) -> Option<UncertaintyLabel> {
    let marked = LABEL_LINE
        .captures_iter(reply)
        .filter_map(|c| label_in(&c[1]))
        .last();
    marked.or_else(|| label_in(reply))
}

/// Knowledge phrase from the last `Missing Knowledge:` line of a reply.
pub fn parse_knowledge_gap(reply: &str) -> Option<String> {
    reply
        .lines()
        .rev()
        .filter_map(|l| MISSING_LINE.captures(l))
        .map(|c| {
            c[1].trim()
                .trim_matches(|ch: char| matches!(ch, '*' | '"' | '<' | '>' | '`' | '“' | '”'))
                .trim()
                .trim_end_matches('.')
                .to_string()
        })
        .find(|s| !s.is_empty())
}

fn check_samples(question: &Question, samples: &[AnswerSample]) -> Result<(), DiagnosisError> {
    if samples.is_empty() || samples.iter().any(|s| s.question_id != question.id) {
        return Err(DiagnosisError::MissingSamples(question.id.clone()));
    }
    Ok(())
}

/// Label the source of a question's uncertainty. The returned record never
/// carries a knowledge gap; see [`extract_knowledge_gap`].
pub fn attribute_uncertainty(
    question: &Question,
    samples: &[AnswerSample],
    config: &DiagnosisConfig,
    backend: &dyn Backend,
) -> Result<(UncertaintyLabel, String), DiagnosisError> {
    check_samples(question, samples)?;
    let prompt = config.render(&config.attribution_prompt_template, question, samples);
    let mut messages = vec![Message::user(prompt)];
    let attempts = config.max_label_retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            messages.push(Message::assistant(last.clone()));
            messages.push(Message::user(REASK));
        }
        let request = GenerationRequest::new(
            config.auxiliary_model.clone(),
            messages.clone(),
            format!("{}#attribute", question.id),
        )
        .temperature(0.0);
        last = gateway::generate(backend, &request)?.text;
        if let Some(label) = parse_label(&last) {
            return Ok((label, last));
        }
    }
    Err(DiagnosisError::LabelUnparseable {
        attempts,
        reply: last,
    })
}

/// Name the missing knowledge behind a Gaps/Both question. Returns the
/// concise phrase and the full reply.
pub fn extract_knowledge_gap(
    question: &Question,
    samples: &[AnswerSample],
    config: &DiagnosisConfig,
    backend: &dyn Backend,
) -> Result<(String, String), DiagnosisError> {
    check_samples(question, samples)?;
    let prompt = config.render(&config.extraction_prompt_template, question, samples);
    let request = GenerationRequest::new(
        config.auxiliary_model.clone(),
        vec![Message::user(prompt)],
        format!("{}#extract", question.id),
    )
    .temperature(0.0);
    let reply = gateway::generate(backend, &request)?.text;
    match parse_knowledge_gap(&reply) {
        Some(gap) => Ok((gap, reply)),
        None => Err(DiagnosisError::ExtractionUnparseable(reply)),
    }
}

/// Attribution followed, when the label needs it, by extraction.
pub fn diagnose_question(
    question: &Question,
    samples: &[AnswerSample],
    config: &DiagnosisConfig,
    backend: &dyn Backend,
) -> Result<DiagnosisRecord, DiagnosisError> {
    let (label, rationale) = attribute_uncertainty(question, samples, config, backend)?;
    if !label.needs_knowledge() {
        return Ok(DiagnosisRecord::new(
            &question.id,
            label,
            rationale,
            None,
            &config.auxiliary_model,
        )?);
    }
    let (gap, gap_rationale) = extract_knowledge_gap(question, samples, config, backend)?;
    Ok(DiagnosisRecord::new(
        &question.id,
        label,
        rationale,
        Some(gap),
        &config.auxiliary_model,
    )?
    .with_gap_rationale(gap_rationale))
}

/// Per-question result of [`diagnose_corpus`].
#[derive(Debug)]
pub struct DiagnosisOutcome {
    pub question_id: String,
    pub result: Result<DiagnosisRecord, DiagnosisError>,
}

/// Persisted form of a diagnosis outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DiagnosisEntry {
    Diagnosed { record: DiagnosisRecord },
    Failed { question_id: String, error: String },
}

impl DiagnosisEntry {
    pub fn question_id(&self) -> &str {
        match self {
            DiagnosisEntry::Diagnosed { record } => record.question_id(),
            DiagnosisEntry::Failed { question_id, .. } => question_id,
        }
    }

    pub fn record(&self) -> Option<&DiagnosisRecord> {
        match self {
            DiagnosisEntry::Diagnosed { record } => Some(record),
            DiagnosisEntry::Failed { .. } => None,
        }
    }
}

impl DiagnosisOutcome {
    /// The entry to persist, or `None` for transient provider failures.
    pub fn to_entry(&self) -> Option<DiagnosisEntry> {
        match &self.result {
            Ok(record) => Some(DiagnosisEntry::Diagnosed {
                record: record.clone(),
            }),
            Err(e) if e.is_transient() => None,
            Err(e) => Some(DiagnosisEntry::Failed {
                question_id: self.question_id.clone(),
                error: e.to_string(),
            }),
        }
    }
}

/// Diagnose every flagged question. Questions at or below `tau` get no
/// outcome; per-question errors are returned in place.
pub fn diagnose_corpus(
    questions: &[Question],
    dists: &[AnswerDistribution],
    samples: &[AnswerSample],
    config: &DiagnosisConfig,
    backend: &dyn Backend,
) -> Result<Vec<DiagnosisOutcome>, DiagnosisError> {
    config.validate()?;
    let by_id: BTreeMap<&str, &AnswerDistribution> =
        dists.iter().map(|d| (d.question_id.as_str(), d)).collect();
    let mut grouped: BTreeMap<&str, Vec<AnswerSample>> = BTreeMap::new();
    for s in samples {
        grouped
            .entry(s.question_id.as_str())
            .or_default()
            .push(s.clone());
    }
    for group in grouped.values_mut() {
        group.sort_by_key(|s| s.sample_index);
    }

    let mut flagged = Vec::new();
    for q in questions {
        let dist = by_id
            .get(q.id.as_str())
            .ok_or_else(|| DiagnosisError::MissingDistribution(q.id.clone()))?;
        if dist.entropy > config.tau {
            flagged.push(q);
        }
    }

    Ok(flagged
        .par_iter()
        .map(|q| {
            let qs = grouped.get(q.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            DiagnosisOutcome {
                question_id: q.id.clone(),
                result: diagnose_question(q, qs, config, backend),
            }
        })
        .collect())
}

/// Label counts in report order.
pub fn label_histogram<'a>(
    records: impl IntoIterator<Item = &'a DiagnosisRecord>,
) -> Vec<(UncertaintyLabel, usize)> {
    let mut counts: BTreeMap<UncertaintyLabel, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.label()).or_default() += 1;
    }
    UncertaintyLabel::REPORT_ORDER
        .into_iter()
        .map(|l| (l, counts.get(&l).copied().unwrap_or(0)))
        .collect()
}
