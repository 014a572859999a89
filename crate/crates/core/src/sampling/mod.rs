//! Multi-sample answering, answer distributions and the three confidence
//! measures (self-consistency, verbalization, perplexity).

mod extract;

use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

pub use extract::{extract_answer, matches_gold, normalize, ExtractionMode, Normalization};

use crate::gateway::{self, Backend, GatewayError, GenerationRequest, Message};
use crate::model::{AnswerCluster, AnswerDistribution, AnswerSample, ProviderMeta, Question};
use crate::prompts;

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no samples to aggregate")]
    EmptySamples,
    #[error("samples mix question ids {expected:?} and {found:?}")]
    MixedQuestionIds { expected: String, found: String },
    #[error("could not parse a confidence in [0, 1] from {0:?}")]
    ConfidenceUnparseable(String),
    #[error("token likelihood list is empty")]
    EmptyLikelihoods,
    #[error("token likelihood {value} at position {index} is outside (0, 1]")]
    OutOfRangeLikelihood { index: usize, value: f64 },
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
}

/// Logarithm base for reported entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EntropyBase {
    #[default]
    Nats,
    Bits,
}

impl EntropyBase {
    fn scale(self) -> f64 {
        match self {
            EntropyBase::Nats => 1.0,
            EntropyBase::Bits => std::f64::consts::LN_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub target_model: String,
    pub n_samples: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub answer_extraction_mode: ExtractionMode,
    pub normalization: Normalization,
    pub entropy_base: EntropyBase,
    /// Request token likelihoods with each sample (needed for perplexity).
    pub want_logprobs: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            target_model: "gpt-3.5-turbo".into(),
            n_samples: 10,
            temperature: 1.0,
            max_tokens: 1024,
            answer_extraction_mode: ExtractionMode::Auto,
            normalization: Normalization::default(),
            entropy_base: EntropyBase::Nats,
            want_logprobs: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.n_samples < 2 {
            return Err(SamplingError::InvalidConfig(format!(
                "n_samples must be >= 2, got {}",
                self.n_samples
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(SamplingError::InvalidConfig(
                "independent sampling needs temperature > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn extract(&self, raw: &str, question: &Question) -> String {
        extract_answer(
            raw,
            question,
            self.answer_extraction_mode,
            self.normalization,
        )
    }

    pub fn is_correct(&self, extracted: &str, question: &Question) -> Option<bool> {
        matches_gold(
            extracted,
            question,
            self.answer_extraction_mode,
            self.normalization,
        )
    }
}

/// Shannon entropy of the empirical distribution given by `counts` (nats).
///
/// Uniform counts evaluate to exactly `ln K`, a single cluster to exactly 0.
pub fn entropy_from_counts(counts: &[usize]) -> f64 {
    let counts: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let k = counts.len();
    if k <= 1 {
        return 0.0;
    }
    let max = (k as f64).ln();
    if counts.iter().all(|&c| c == counts[0]) {
        return max;
    }
    let n: usize = counts.iter().sum();
    let n = n as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.clamp(0.0, max)
}

/// Cluster samples by extracted answer. Clusters keep first-occurrence order
/// after sorting samples by index, so the majority tie-break is "earliest
/// sampled wins".
pub fn build_distribution(samples: &[AnswerSample]) -> Result<AnswerDistribution, SamplingError> {
    build_distribution_in(samples, EntropyBase::Nats)
}

pub fn build_distribution_in(
    samples: &[AnswerSample],
    base: EntropyBase,
) -> Result<AnswerDistribution, SamplingError> {
    let first = samples.first().ok_or(SamplingError::EmptySamples)?;
    if let Some(other) = samples.iter().find(|s| s.question_id != first.question_id) {
        return Err(SamplingError::MixedQuestionIds {
            expected: first.question_id.clone(),
            found: other.question_id.clone(),
        });
    }
    let mut ordered: Vec<&AnswerSample> = samples.iter().collect();
    ordered.sort_by_key(|s| s.sample_index);

    let mut clusters: Vec<AnswerCluster> = Vec::new();
    for s in &ordered {
        match clusters.iter_mut().find(|c| c.answer == s.extracted_answer) {
            Some(c) => c.count += 1,
            None => clusters.push(AnswerCluster {
                answer: s.extracted_answer.clone(),
                count: 1,
                probability: 0.0,
            }),
        }
    }
    let n = ordered.len();
    for c in &mut clusters {
        c.probability = c.count as f64 / n as f64;
    }
    let counts: Vec<usize> = clusters.iter().map(|c| c.count).collect();
    let entropy = entropy_from_counts(&counts) / base.scale();

    let mut majority = &clusters[0];
    for c in &clusters[1..] {
        if c.count > majority.count {
            majority = c;
        }
    }
    Ok(AnswerDistribution {
        question_id: first.question_id.clone(),
        majority_answer: majority.answer.clone(),
        majority_confidence: majority.count as f64 / n as f64,
        clusters,
        n_samples: n,
        entropy,
    })
}

/// Relative frequency of the majority answer.
pub fn self_consistency_confidence(dist: &AnswerDistribution) -> f64 {
    let top = dist.clusters.iter().map(|c| c.count).max().unwrap_or(0);
    if dist.n_samples == 0 {
        return 0.0;
    }
    top as f64 / dist.n_samples as f64
}

/// Geometric mean of token likelihoods.
pub fn perplexity_confidence(token_likelihoods: &[f64]) -> Result<f64, SamplingError> {
    if token_likelihoods.is_empty() {
        return Err(SamplingError::EmptyLikelihoods);
    }
    let mut sum = 0.0;
    for (index, &value) in token_likelihoods.iter().enumerate() {
        if !(value > 0.0 && value <= 1.0) {
            return Err(SamplingError::OutOfRangeLikelihood { index, value });
        }
        sum += value.ln();
    }
    Ok((sum / token_likelihoods.len() as f64).exp().min(1.0))
}

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+(?:\.\d+)?|\.\d+)\s*(%)?").unwrap());

/// First number in `[0, 1]` in a reply; `85%` reads as 0.85.
pub fn parse_confidence(reply: &str) -> Result<f64, SamplingError> {
    for c in NUMBER.captures_iter(reply) {
        let Ok(mut v) = c[1].parse::<f64>() else {
            continue;
        };
        if c.get(2).is_some() {
            v /= 100.0;
        }
        if (0.0..=1.0).contains(&v) {
            return Ok(v);
        }
    }
    Err(SamplingError::ConfidenceUnparseable(reply.to_string()))
}

/// Ask the model how likely `answer` is to be correct.
pub fn verbalized_confidence(
    question: &Question,
    answer: &AnswerSample,
    model: &str,
    backend: &dyn Backend,
) -> Result<f64, SamplingError> {
    if answer.question_id != question.id {
        return Err(SamplingError::MixedQuestionIds {
            expected: question.id.clone(),
            found: answer.question_id.clone(),
        });
    }
    let request = GenerationRequest::new(
        model,
        vec![Message::user(prompts::verbalization_prompt(
            question,
            &answer.raw_text,
        ))],
        format!("{}#{}#verbalize", question.id, answer.sample_index),
    )
    .temperature(0.0)
    .max_tokens(64);
    let reply = gateway::generate(backend, &request)?;
    parse_confidence(&reply.text)
}

/// Draw N answers for `question` (optionally with injected context), tagging
/// requests `<tag_base>#<i>`.
pub fn sample_with_context(
    question: &Question,
    context: Option<&str>,
    tag_base: &str,
    config: &SamplingConfig,
    backend: &dyn Backend,
) -> Result<Vec<AnswerSample>, SamplingError> {
    config.validate()?;
    let prompt = prompts::target_prompt(question, context);
    let mut samples = (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let request = GenerationRequest::new(
                config.target_model.clone(),
                vec![Message::user(prompt.clone())],
                format!("{tag_base}#{i}"),
            )
            .temperature(config.temperature)
            .max_tokens(config.max_tokens)
            .with_logprobs(config.want_logprobs);
            let response = gateway::generate(backend, &request)?;
            Ok(AnswerSample {
                question_id: question.id.clone(),
                sample_index: i,
                extracted_answer: config.extract(&response.text, question),
                raw_text: response.text,
                provider_meta: ProviderMeta {
                    model: config.target_model.clone(),
                    prompt_tokens: response.usage.prompt_tokens,
                    completion_tokens: response.usage.completion_tokens,
                    token_likelihoods: response.token_likelihoods,
                },
            })
        })
        .collect::<Result<Vec<_>, SamplingError>>()?;
    samples.sort_by_key(|s| s.sample_index);
    Ok(samples)
}

/// Draw N answers for the question as posed.
pub fn sample_answers(
    question: &Question,
    config: &SamplingConfig,
    backend: &dyn Backend,
) -> Result<Vec<AnswerSample>, SamplingError> {
    sample_with_context(question, None, &question.id, config, backend)
}

/// Fraction of samples whose answer matches gold.
pub fn sample_accuracy(
    samples: &[AnswerSample],
    question: &Question,
    config: &SamplingConfig,
) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut correct = 0usize;
    for s in samples {
        if config.is_correct(&s.extracted_answer, question)? {
            correct += 1;
        }
    }
    Some(correct as f64 / samples.len() as f64)
}

/// 1.0 if the majority answer matches gold, 0.0 otherwise.
pub fn majority_accuracy(
    dist: &AnswerDistribution,
    question: &Question,
    config: &SamplingConfig,
) -> Option<f64> {
    config
        .is_correct(&dist.majority_answer, question)
        .map(|ok| if ok { 1.0 } else { 0.0 })
}
