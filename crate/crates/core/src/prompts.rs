//! Prompt templates and rendering.
//!
//! Templates use `{name}` placeholders. Rendering is a single left-to-right
//! pass, so placeholder-like text inside substituted values is left alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::Question;

pub const ATTRIBUTION_TEMPLATE: &str = "\
Tom was asked the same question {n} times and gave the {n} answers listed below. \
His answers do not agree with each other, which shows that Tom is uncertain.

Question:
{question}

Tom's answers:
{answers}

Compare Tom's answers carefully and reason about why they disagree. Decide which \
of the following best explains the source of Tom's uncertainty:

1. Question Ambiguity: the question itself is unclear or under-specified, so the \
answers interpret it in different ways.
2. Knowledge Gaps: Tom fails to retrieve or apply a necessary fact or concept, so \
the answers reason from different or mistaken knowledge.
3. Both: the question is ambiguous and a piece of knowledge is also missing.

Explain your analysis, then finish with a final line of the form
Label: <Question Ambiguity | Knowledge Gaps | Both>";

pub const EXTRACTION_TEMPLATE: &str = "\
Tom answered the question below {n} times. His answers disagree, and the \
disagreement comes from missing or misunderstood knowledge.

Question:
{question}

Tom's answers:
{answers}

Work in two steps.
Step 1 (difference analysis): summarize the key differences between Tom's answers.
Step 2 (knowledge identification): identify the single, specific fact or concept \
that Tom is missing or misunderstanding and that would resolve these differences.

Finish with exactly one final line of the form
Missing Knowledge: <concise phrase naming the fact or concept>";

pub const SYNTHESIS_TEMPLATE: &str = "\
Write a short, self-contained knowledge snippet about the following concept:

{knowledge}

The snippet must contain:
- a clear definition of the concept;
- a core explanation of how it works;
- any critical conditions or key formulas.

Write it as a standalone block that could be placed before any question as \
supplemental context. Do not refer to any particular question. Output only the snippet.";

pub const CLARIFICATION_TEMPLATE: &str = "\
Read the question below and check it for real-world ambiguities, such as an \
unspecified timeframe, location, or referent.

If the question is ambiguous, rewrite it by adding succinct, fact-grounded \
clarifications that resolve the ambiguity without altering the question's intent.
If the question is already clear, reproduce it unchanged.

Output only the resulting question.

Question:
{question}";

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template is missing required placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A prompt template with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn from_file(path: &Path) -> Result<Self, TemplateError> {
        std::fs::read_to_string(path)
            .map(Self)
            .map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn require(&self, placeholders: &[&str]) -> Result<(), TemplateError> {
        for p in placeholders {
            if !self.0.contains(&format!("{{{p}}}")) {
                return Err(TemplateError::MissingPlaceholder((*p).to_string()));
            }
        }
        Ok(())
    }

    /// Substitute known placeholders; unknown `{...}` runs are kept verbatim.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let src = self.0.as_str();
        let mut out = String::with_capacity(src.len());
        let mut rest = src;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let replaced = after.find('}').and_then(|close| {
                let name = &after[..close];
                vars.iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| (close, *v))
            });
            match replaced {
                Some((close, value)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Truncate to at most `budget` characters on a char boundary.
pub fn truncate_chars(text: &str, budget: usize) -> &str {
    match text.char_indices().nth(budget) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}

/// Number the responses 1..N in the order given, truncating each.
pub fn format_answers<'a>(responses: impl IntoIterator<Item = &'a str>, budget: usize) -> String {
    responses
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let r = r.trim();
            let cut = truncate_chars(r, budget);
            let ellipsis = if cut.len() < r.len() { " [...]" } else { "" };
            format!("Answer {}:\n{cut}{ellipsis}", i + 1)
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Question text plus its options, as shown to any model.
pub fn question_block(question: &Question) -> String {
    let mut s = question.text.trim().to_string();
    if let Some(choices) = &question.choices {
        s.push_str("\nOptions:");
        for c in choices {
            s.push_str(&format!("\n{}. {}", c.label, c.text));
        }
    }
    s
}

/// Prompt sent to the target model, optionally preceded by injected context.
pub fn target_prompt(question: &Question, context: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(ctx) = context {
        s.push_str("Context:\n");
        s.push_str(ctx.trim());
        s.push_str("\n\n");
    }
    s.push_str("Question:\n");
    s.push_str(&question_block(question));
    s.push_str("\n\n");
    if question.is_multiple_choice() {
        s.push_str(
            "Think step by step, then give your final answer on the last line in the form \
             \"Answer: <option letter>\".",
        );
    } else {
        s.push_str(
            "Think step by step, then give your final answer on the last line in the form \
             \"Answer: <short answer>\".",
        );
    }
    s
}

/// Verbalized-confidence prompt for one question/answer pair.
pub fn verbalization_prompt(question: &Question, answer: &str) -> String {
    format!(
        "Question: \"{}\"\nAnswer: \"{}\"\nProvide the reasoning correctness probability for the answer.",
        question_block(question),
        answer.trim()
    )
}
