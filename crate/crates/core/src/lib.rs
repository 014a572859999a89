//! Answer-entropy uncertainty quantification for LLMs, plus diagnosis of
//! where that uncertainty comes from.
//!
//! A run samples N answers per question from a target model, measures the
//! entropy of the resulting answer distribution, and sends high-entropy
//! questions to an auxiliary model that labels the cause (question ambiguity,
//! knowledge gaps, or both) and names missing knowledge. Clarification and
//! knowledge-injection studies then re-sample to check those diagnoses.

pub mod calibration;
pub mod clock;
pub mod config;
pub mod diagnosis;
pub mod gateway;
pub mod intervention;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod sampling;
pub mod store;

pub use config::RunConfig;
pub use model::{
    AnswerDistribution, AnswerSample, ConfidenceMethod, ConfidenceRecord, DiagnosisRecord,
    InterventionKind, InterventionResult, Question, UncertaintyLabel,
};
