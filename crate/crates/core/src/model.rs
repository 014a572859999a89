//! Shared domain types: questions, sampled answers, answer distributions,
//! diagnoses, intervention results and confidence records.
//!
//! Everything here is a plain value object. Serialization lives in
//! [`crate::store`]; this module only defines shapes and invariants.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Sentinel cluster for samples whose final answer could not be extracted.
pub const UNPARSED: &str = "UNPARSED";

/// One multiple-choice option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

/// A corpus item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
    #[serde(default, rename = "gold", skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_aliases: Vec<String>,
    #[serde(rename = "dataset")]
    pub dataset_tag: String,
    /// Zero for corpus originals; bumped by each rewrite (e.g. clarification).
    #[serde(default, skip_serializing_if = "is_zero")]
    pub revision: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>, dataset: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            choices: None,
            gold_answer: None,
            gold_aliases: Vec::new(),
            dataset_tag: dataset.into(),
            revision: 0,
        }
    }

    pub fn with_choices<L: Into<String>, T: Into<String>>(
        mut self,
        choices: impl IntoIterator<Item = (L, T)>,
    ) -> Self {
        self.choices = Some(
            choices
                .into_iter()
                .map(|(label, text)| Choice {
                    label: label.into(),
                    text: text.into(),
                })
                .collect(),
        );
        self
    }

    pub fn with_gold(mut self, gold: impl Into<String>) -> Self {
        self.gold_answer = Some(gold.into());
        self
    }

    pub fn is_multiple_choice(&self) -> bool {
        self.choices.as_ref().is_some_and(|c| !c.is_empty())
    }

    /// Option labels, if this is a multiple-choice question.
    pub fn choice_labels(&self) -> Vec<&str> {
        self.choices
            .iter()
            .flatten()
            .map(|c| c.label.as_str())
            .collect()
    }

    /// The gold answer followed by its aliases.
    pub fn gold_answers(&self) -> impl Iterator<Item = &str> {
        self.gold_answer
            .iter()
            .map(String::as_str)
            .chain(self.gold_aliases.iter().map(String::as_str))
    }
}

/// Token accounting and provider details attached to a sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProviderMeta {
    pub model: String,
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_likelihoods: Option<Vec<f64>>,
}

/// One sampled model response with its extracted final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSample {
    pub question_id: String,
    pub sample_index: usize,
    pub raw_text: String,
    pub extracted_answer: String,
    pub provider_meta: ProviderMeta,
}

impl AnswerSample {
    pub fn is_parsed(&self) -> bool {
        self.extracted_answer != UNPARSED
    }
}

/// A unique-answer cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCluster {
    pub answer: String,
    pub count: usize,
    pub probability: f64,
}

/// Empirical distribution over the unique answers sampled for a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub question_id: String,
    /// Clusters in order of first appearance among the samples.
    pub clusters: Vec<AnswerCluster>,
    pub n_samples: usize,
    /// Shannon entropy in nats.
    pub entropy: f64,
    pub majority_answer: String,
    pub majority_confidence: f64,
}

impl AnswerDistribution {
    pub fn counts(&self) -> BTreeMap<&str, usize> {
        self.clusters
            .iter()
            .map(|c| (c.answer.as_str(), c.count))
            .collect()
    }

    pub fn count_of(&self, answer: &str) -> usize {
        self.clusters
            .iter()
            .find(|c| c.answer == answer)
            .map_or(0, |c| c.count)
    }
}

/// Source of a question's uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UncertaintyLabel {
    QuestionAmbiguity,
    KnowledgeGaps,
    Both,
}

impl UncertaintyLabel {
    /// Display order used by the clarification report.
    pub const REPORT_ORDER: [UncertaintyLabel; 3] = [
        UncertaintyLabel::QuestionAmbiguity,
        UncertaintyLabel::Both,
        UncertaintyLabel::KnowledgeGaps,
    ];

    pub fn needs_knowledge(self) -> bool {
        !matches!(self, UncertaintyLabel::QuestionAmbiguity)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            UncertaintyLabel::QuestionAmbiguity => "Question Ambiguity",
            UncertaintyLabel::KnowledgeGaps => "Knowledge Gaps",
            UncertaintyLabel::Both => "Both",
        }
    }

    pub fn from_display_name(s: &str) -> Option<Self> {
        Self::REPORT_ORDER
            .into_iter()
            .find(|l| l.display_name().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for UncertaintyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiagnosisRecordError {
    #[error("label {0} requires a knowledge gap")]
    MissingKnowledgeGap(UncertaintyLabel),
    #[error("label Question Ambiguity must not carry a knowledge gap")]
    UnexpectedKnowledgeGap,
}

/// Result of the two-step diagnosis for one question.
///
/// `knowledge_gap` is present exactly when the label is `KnowledgeGaps` or
/// `Both`; construction and deserialization both enforce this.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDiagnosisRecord")]
pub struct DiagnosisRecord {
    question_id: String,
    label: UncertaintyLabel,
    rationale: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    knowledge_gap: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gap_rationale: Option<String>,
    auxiliary_model: String,
}

#[derive(Deserialize)]
struct RawDiagnosisRecord {
    question_id: String,
    label: UncertaintyLabel,
    rationale: String,
    #[serde(default)]
    knowledge_gap: Option<String>,
    #[serde(default)]
    gap_rationale: Option<String>,
    auxiliary_model: String,
}

impl TryFrom<RawDiagnosisRecord> for DiagnosisRecord {
    type Error = DiagnosisRecordError;

    fn try_from(raw: RawDiagnosisRecord) -> Result<Self, Self::Error> {
        let mut rec = DiagnosisRecord::new(
            raw.question_id,
            raw.label,
            raw.rationale,
            raw.knowledge_gap,
            raw.auxiliary_model,
        )?;
        rec.gap_rationale = raw.gap_rationale;
        Ok(rec)
    }
}

impl DiagnosisRecord {
    pub fn new(
        question_id: impl Into<String>,
        label: UncertaintyLabel,
        rationale: impl Into<String>,
        knowledge_gap: Option<String>,
        auxiliary_model: impl Into<String>,
    ) -> Result<Self, DiagnosisRecordError> {
        match (label.needs_knowledge(), knowledge_gap.is_some()) {
            (true, false) => return Err(DiagnosisRecordError::MissingKnowledgeGap(label)),
            (false, true) => return Err(DiagnosisRecordError::UnexpectedKnowledgeGap),
            _ => {}
        }
        Ok(Self {
            question_id: question_id.into(),
            label,
            rationale: rationale.into(),
            knowledge_gap,
            gap_rationale: None,
            auxiliary_model: auxiliary_model.into(),
        })
    }

    pub fn with_gap_rationale(mut self, text: impl Into<String>) -> Self {
        self.gap_rationale = Some(text.into());
        self
    }

    pub fn question_id(&self) -> &str {
        &self.question_id
    }

    pub fn label(&self) -> UncertaintyLabel {
        self.label
    }

    pub fn rationale(&self) -> &str {
        &self.rationale
    }

    pub fn knowledge_gap(&self) -> Option<&str> {
        self.knowledge_gap.as_deref()
    }

    pub fn gap_rationale(&self) -> Option<&str> {
        self.gap_rationale.as_deref()
    }

    pub fn auxiliary_model(&self) -> &str {
        &self.auxiliary_model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InterventionKind {
    Clarification,
    KnowledgeInjection,
}

/// Paired before/after measurements for one question under one intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub question_id: String,
    pub kind: InterventionKind,
    pub label: UncertaintyLabel,
    pub modified_context: String,
    pub unc_before: f64,
    pub unc_after: f64,
    /// Majority-vote correctness before, when a gold answer exists.
    pub acc_before: Option<f64>,
    pub acc_after: Option<f64>,
    /// Fraction of individual samples matching gold.
    pub sample_acc_before: Option<f64>,
    pub sample_acc_after: Option<f64>,
    pub unc_reduction_rate: f64,
    pub acc_improvement_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConfidenceMethod {
    Verbalization,
    Perplexity,
    SelfConsistency,
}

impl ConfidenceMethod {
    pub const ALL: [ConfidenceMethod; 3] = [
        ConfidenceMethod::Verbalization,
        ConfidenceMethod::Perplexity,
        ConfidenceMethod::SelfConsistency,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ConfidenceMethod::Verbalization => "VERB",
            ConfidenceMethod::Perplexity => "PPL",
            ConfidenceMethod::SelfConsistency => "SC",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        Self::ALL.into_iter().find(|m| {
            m.short_name().eq_ignore_ascii_case(s) || format!("{m:?}").eq_ignore_ascii_case(s)
        })
    }
}

impl fmt::Display for ConfidenceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// A confidence score paired with the correctness of the answer it scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub question_id: String,
    pub method: ConfidenceMethod,
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationRule {
    EmptyId,
    EmptyText,
    DuplicateId,
    EmptyChoiceLabel,
    DuplicateChoiceLabel(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub question_id: String,
    pub rule: ValidationRule,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.rule {
            ValidationRule::EmptyId => write!(f, "question with empty id"),
            ValidationRule::EmptyText => write!(f, "{}: empty question text", self.question_id),
            ValidationRule::DuplicateId => write!(f, "{}: duplicate question id", self.question_id),
            ValidationRule::EmptyChoiceLabel => {
                write!(f, "{}: empty choice label", self.question_id)
            }
            ValidationRule::DuplicateChoiceLabel(l) => {
                write!(f, "{}: duplicate choice label {l:?}", self.question_id)
            }
        }
    }
}

/// Check corpus invariants. Returns an empty list when everything holds.
pub fn validate_corpus(questions: &[Question]) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for q in questions {
        let issue = |rule| ValidationIssue {
            question_id: q.id.clone(),
            rule,
        };
        if q.id.trim().is_empty() {
            issues.push(issue(ValidationRule::EmptyId));
        } else if !seen.insert(q.id.as_str()) {
            issues.push(issue(ValidationRule::DuplicateId));
        }
        if q.text.trim().is_empty() {
            issues.push(issue(ValidationRule::EmptyText));
        }
        let mut labels = HashSet::new();
        for c in q.choices.iter().flatten() {
            if c.label.trim().is_empty() {
                issues.push(issue(ValidationRule::EmptyChoiceLabel));
            } else if !labels.insert(c.label.as_str()) {
                issues.push(issue(ValidationRule::DuplicateChoiceLabel(c.label.clone())));
            }
        }
    }
    issues
}
