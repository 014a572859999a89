//! Final-answer extraction and normalization.
//!
//! Extraction order: an explicit marker line (`Answer:` / `Final answer:`),
//! then for multiple choice the last standalone option letter, then the last
//! non-empty line. Anything that yields nothing becomes [`UNPARSED`].

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{Question, UNPARSED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ExtractionMode {
    /// Option letter for questions with choices, marker text otherwise.
    #[default]
    Auto,
    MultipleChoiceLetter,
    FinalAnswerMarker,
    FullTextNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub strip_articles: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
            strip_articles: true,
        }
    }
}

static MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:final\s+answer|answer)\s*(?:is)?\s*\**\s*[:：]\s*(.*)$").unwrap()
});

static LEADING_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[\s*(\[]*([A-Za-z])(?:[\s)\].:,*]|$)").unwrap());

static STANDALONE_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|[\s(\[*])([A-Z])(?:[\s)\].:,*]|$)").unwrap());

const ARTICLES: [&str; 3] = ["a ", "an ", "the "];

/// Canonical form used for open-ended answer equivalence.
pub fn normalize(text: &str, norm: Normalization) -> String {
    let mut s: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if norm.lowercase {
        s = s.to_lowercase();
    }
    if norm.strip_punctuation {
        let trimmed = s.trim_matches(|c: char| {
            matches!(
                c,
                '.' | ',' | '!' | '?' | ';' | ':' | '"' | '\'' | '*' | '`' | '“' | '”' | '‘' | '’'
            ) || c.is_whitespace()
        });
        s = trimmed.to_string();
    }
    if norm.strip_articles {
        loop {
            let lower = s.to_lowercase();
            match ARTICLES.iter().find(|a| lower.starts_with(*a)) {
                Some(a) => s = s[a.len()..].trim_start().to_string(),
                None => break,
            }
        }
    }
    s
}

fn marker_content(raw: &str) -> Option<String> {
    raw.lines()
        .rev()
        .filter_map(|line| MARKER.captures(line))
        .map(|c| c[1].trim().to_string())
        .find(|s| !s.is_empty())
}

fn last_nonempty_line(raw: &str) -> Option<&str> {
    raw.lines().rev().map(str::trim).find(|l| !l.is_empty())
}

fn labels_for(question: &Question) -> Vec<String> {
    let labels: Vec<String> = question
        .choice_labels()
        .into_iter()
        .map(|l| l.trim().to_uppercase())
        .collect();
    if labels.is_empty() {
        ('A'..='J').map(String::from).collect()
    } else {
        labels
    }
}

/// Option letter from a short answer fragment such as `(B)`, `B. chemical`
/// or the full text of an option.
fn letter_from_fragment(fragment: &str, question: &Question, labels: &[String]) -> Option<String> {
    if let Some(c) = LEADING_LETTER.captures(fragment) {
        let l = c[1].to_uppercase();
        if labels.contains(&l) {
            return Some(l);
        }
    }
    let norm = normalize(fragment, Normalization::default());
    for choice in question.choices.iter().flatten() {
        if !norm.is_empty() && normalize(&choice.text, Normalization::default()) == norm {
            return Some(choice.label.trim().to_uppercase());
        }
    }
    last_standalone_letter(fragment, labels)
}

fn last_standalone_letter(text: &str, labels: &[String]) -> Option<String> {
    let mut found = None;
    for line in text.lines() {
        for c in STANDALONE_LETTER.captures_iter(line) {
            let l = c[1].to_string();
            if labels.contains(&l) {
                found = Some(l);
            }
        }
    }
    found
}

fn extract_letter(raw: &str, question: &Question) -> Option<String> {
    let labels = labels_for(question);
    if let Some(m) = marker_content(raw) {
        if let Some(l) = letter_from_fragment(&m, question, &labels) {
            return Some(l);
        }
    }
    if let Some(l) = last_standalone_letter(raw, &labels) {
        return Some(l);
    }
    last_nonempty_line(raw).and_then(|line| letter_from_fragment(line, question, &labels))
}

/// The canonical final answer in `raw`, or [`UNPARSED`].
pub fn extract_answer(
    raw: &str,
    question: &Question,
    mode: ExtractionMode,
    norm: Normalization,
) -> String {
    let mode = match mode {
        ExtractionMode::Auto if question.is_multiple_choice() => {
            ExtractionMode::MultipleChoiceLetter
        }
        ExtractionMode::Auto => ExtractionMode::FinalAnswerMarker,
        m => m,
    };
    let answer = match mode {
        ExtractionMode::MultipleChoiceLetter => extract_letter(raw, question),
        ExtractionMode::FinalAnswerMarker => marker_content(raw)
            .or_else(|| last_nonempty_line(raw).map(str::to_string))
            .map(|s| normalize(&s, norm)),
        ExtractionMode::FullTextNormalized => Some(normalize(raw, norm)),
        ExtractionMode::Auto => unreachable!(),
    };
    answer
        .filter(|a| !a.is_empty())
        .unwrap_or_else(|| UNPARSED.to_string())
}

/// Whether an extracted answer matches the question's gold answer or any
/// alias. `None` when the question has no gold answer.
pub fn matches_gold(
    extracted: &str,
    question: &Question,
    mode: ExtractionMode,
    norm: Normalization,
) -> Option<bool> {
    question.gold_answer.as_ref()?;
    if extracted == UNPARSED {
        return Some(false);
    }
    let mc = match mode {
        ExtractionMode::Auto => question.is_multiple_choice(),
        ExtractionMode::MultipleChoiceLetter => true,
        _ => false,
    };
    Some(question.gold_answers().any(|g| {
        if mc {
            g.trim().eq_ignore_ascii_case(extracted)
        } else {
            normalize(g, norm) == extracted
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mc() -> Question {
        Question::new("q", "Which sequence?", "obqa").with_choices([
            ("A", "electrical -> chemical -> light"),
            ("B", "chemical -> electrical -> light"),
            ("C", "light -> chemical -> electrical"),
            ("D", "chemical -> light -> electrical"),
        ])
    }

    fn ext(raw: &str, q: &Question) -> String {
        extract_answer(raw, q, ExtractionMode::Auto, Normalization::default())
    }

    #[test]
    fn marker_line_wins() {
        let q = mc();
        assert_eq!(ext("I think (A) is tempting.\nAnswer: B", &q), "B");
        assert_eq!(ext("Reasoning...\nFinal answer: (D)", &q), "D");
        assert_eq!(ext("**Answer:** C. light -> chemical", &q), "C");
    }

    #[test]
    fn option_text_maps_to_label() {
        let q = mc();
        assert_eq!(ext("Answer: chemical -> electrical -> light", &q), "B");
    }

    #[test]
    fn last_standalone_letter_fallback() {
        let q = mc();
        assert_eq!(ext("Option A is wrong; so I pick D here", &q), "D");
    }

    #[test]
    fn unparsed_when_nothing_found() {
        let q = mc();
        assert_eq!(ext("I really cannot tell.", &q), UNPARSED);
        assert_eq!(ext("", &q), UNPARSED);
    }

    #[test]
    fn open_ended_normalization() {
        let q = Question::new("q", "Who was PM of Canada in 1920?", "ambigqa");
        assert_eq!(
            ext("Some reasoning.\nAnswer: The  Arthur Meighen.", &q),
            "arthur meighen"
        );
        assert_eq!(ext("Robert Borden", &q), "robert borden");
    }

    #[test]
    fn normalize_flags() {
        let n = Normalization {
            lowercase: false,
            strip_punctuation: true,
            strip_articles: false,
        };
        assert_eq!(normalize("  The Moon. ", n), "The Moon");
        assert_eq!(normalize("an apple!", Normalization::default()), "apple");
    }

    #[test]
    fn gold_matching() {
        let q = mc().with_gold("B");
        assert_eq!(
            matches_gold("B", &q, ExtractionMode::Auto, Normalization::default()),
            Some(true)
        );
        let mut open = Question::new("q", "x", "t").with_gold("Arthur Meighen");
        open.gold_aliases.push("Meighen".into());
        let n = Normalization::default();
        assert_eq!(
            matches_gold("meighen", &open, ExtractionMode::Auto, n),
            Some(true)
        );
        assert_eq!(
            matches_gold("borden", &open, ExtractionMode::Auto, n),
            Some(false)
        );
        assert_eq!(matches_gold("x", &mc(), ExtractionMode::Auto, n), None);
    }
}
