//! Table rendering (CSV, console, markdown) for study and calibration
//! results, confidence-record CSV I/O, and the markdown run summary.
//!
//! Uncertainty is printed with 3 decimals and percentages with 2. Derived
//! columns (reduction, rates) are computed from the printed values so that
//! every emitted table is internally consistent.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationReport;
use crate::intervention::{acc_improvement_rate, unc_reduction_rate, StudyRow};
use crate::model::{ConfidenceMethod, ConfidenceRecord, UncertaintyLabel};

pub const CLARIFICATION_CSV: &str = "clarification.csv";
pub const INJECTION_CSV: &str = "injection.csv";
pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const REPORT_MD: &str = "report.md";

pub const CLARIFICATION_HEADER: [&str; 7] = [
    "Dataset",
    "Model",
    "Label",
    "Unc. (Before)",
    "Unc. (After)",
    "Unc. Reduction",
    "Unc. Reduction Rate (%)",
];

pub const INJECTION_HEADER: [&str; 8] = [
    "Dataset",
    "Model",
    "Unc. (Before)",
    "Acc. (%) (Before)",
    "Unc. (After)",
    "Acc. (%) (After)",
    "Unc. Reduction Rate (%)",
    "Acc. Improvement Rate (%)",
];

pub const CALIBRATION_HEADER: [&str; 6] = ["Method", "N", "ECE", "AUROC", "Brier", "Bins"];

const DASH: &str = "-";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: row {row}: {message}")]
    BadRow {
        path: String,
        row: usize,
        message: String,
    },
}

pub fn fmt_unc(x: f64) -> String {
    format!("{x:.3}")
}

pub fn fmt_pct(x: f64) -> String {
    format!("{x:.2}")
}

fn shown_unc(x: f64) -> f64 {
    fmt_unc(x).parse().expect("formatted float parses")
}

fn shown_pct(x: f64) -> f64 {
    fmt_pct(x).parse().expect("formatted float parses")
}

/// A rectangular table of already-formatted cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.chars().count());
            }
        }
        w
    }

    /// Fixed-width text with a rule under the header.
    pub fn to_console(&self) -> String {
        let w = self.widths();
        let line = |cells: &[String]| {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{c:<width$}", width = w[i]))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(
            &w.iter()
                .map(|n| "-".repeat(*n))
                .collect::<Vec<_>>()
                .join("  "),
        );
        for r in &self.rows {
            out.push('\n');
            out.push_str(&line(r));
        }
        out.push('\n');
        out
    }

    pub fn to_markdown(&self) -> String {
        let row = |cells: &[String]| format!("| {} |", cells.join(" | "));
        let mut out = row(&self.header);
        out.push('\n');
        out.push_str(&format!(
            "|{}|",
            self.header
                .iter()
                .map(|_| "---")
                .collect::<Vec<_>>()
                .join("|")
        ));
        for r in &self.rows {
            out.push('\n');
            out.push_str(&row(r));
        }
        out.push('\n');
        out
    }
}

fn label_name(label: Option<UncertaintyLabel>) -> &'static str {
    label.map_or("All", UncertaintyLabel::display_name)
}

/// Clarification study table, one row per (dataset, label).
pub fn clarification_table(rows: &[StudyRow], model: &str) -> Table {
    let mut t = Table::new(&CLARIFICATION_HEADER);
    for r in rows {
        let before = shown_unc(r.unc_before);
        let after = shown_unc(r.unc_after);
        t.rows.push(vec![
            r.dataset.clone(),
            model.to_string(),
            label_name(r.label).to_string(),
            fmt_unc(before),
            fmt_unc(after),
            fmt_unc(before - after),
            fmt_pct(unc_reduction_rate(before, after)),
        ]);
    }
    t
}

/// Knowledge-injection study table, one row per dataset.
pub fn injection_table(rows: &[StudyRow], model: &str) -> Table {
    let mut t = Table::new(&INJECTION_HEADER);
    for r in rows {
        let before = shown_unc(r.unc_before);
        let after = shown_unc(r.unc_after);
        let acc_b = r.acc_before.map(shown_pct);
        let acc_a = r.acc_after.map(shown_pct);
        let opt = |v: Option<f64>| v.map_or_else(|| DASH.to_string(), fmt_pct);
        t.rows.push(vec![
            r.dataset.clone(),
            model.to_string(),
            fmt_unc(before),
            opt(acc_b),
            fmt_unc(after),
            opt(acc_a),
            fmt_pct(unc_reduction_rate(before, after)),
            opt(acc_b
                .zip(acc_a)
                .map(|(b, a)| acc_improvement_rate(b / 100.0, a / 100.0))
                .map(shown_pct)),
        ]);
    }
    t
}

/// Method comparison table in VERB, PPL, SC order. Methods without a
/// report get a row of dashes.
pub fn calibration_table(reports: &[CalibrationReport]) -> Table {
    let mut t = Table::new(&CALIBRATION_HEADER);
    for method in ConfidenceMethod::ALL {
        let row = match reports.iter().find(|r| r.method == method) {
            Some(r) => vec![
                method.short_name().to_string(),
                r.n.to_string(),
                format!("{:.4}", r.ece),
                format!("{:.4}", r.auroc),
                format!("{:.4}", r.brier),
                r.n_bins.to_string(),
            ],
            None => {
                let mut row = vec![method.short_name().to_string()];
                row.extend(std::iter::repeat_n(DASH.to_string(), 5));
                row
            }
        };
        t.rows.push(row);
    }
    t
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfidenceRow {
    question_id: String,
    method: String,
    confidence: f64,
    correct: String,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

/// Read `question_id,method,confidence,correct` rows. `method` accepts the
/// short (SC/PPL/VERB) or long names; `correct` accepts true/false or 1/0.
pub fn read_confidences(path: &Path) -> Result<Vec<ConfidenceRecord>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<ConfidenceRow>().enumerate() {
        let bad = |message: String| ReportError::BadRow {
            path: path.display().to_string(),
            row: i + 1,
            message,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let method = ConfidenceMethod::parse(&row.method)
            .ok_or_else(|| bad(format!("unknown method {:?}", row.method)))?;
        let correct = parse_bool(&row.correct)
            .ok_or_else(|| bad(format!("bad correct {:?}", row.correct)))?;
        if !(0.0..=1.0).contains(&row.confidence) {
            return Err(bad(format!("confidence {} outside [0, 1]", row.confidence)));
        }
        out.push(ConfidenceRecord {
            question_id: row.question_id,
            method,
            confidence: row.confidence,
            correct,
        });
    }
    Ok(out)
}

pub fn confidences_csv(records: &[ConfidenceRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(ConfidenceRow {
            question_id: r.question_id.clone(),
            method: r.method.short_name().to_string(),
            confidence: r.confidence,
            correct: r.correct.to_string(),
        })
        .expect("in-memory write");
    }
    if records.is_empty() {
        w.write_record(["question_id", "method", "confidence", "correct"])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

/// Everything the markdown summary shows.
#[derive(Debug, Clone, Default)]
pub struct ReportInput {
    pub run_id: String,
    pub target_model: String,
    pub auxiliary_model: String,
    pub n_samples: usize,
    pub tau: f64,
    pub n_questions: usize,
    pub entropies: Vec<f64>,
    pub n_flagged: usize,
    pub label_counts: Vec<(UncertaintyLabel, usize)>,
    pub diagnosis_failures: usize,
    pub clarification: Option<StudySection>,
    pub injection: Option<StudySection>,
    pub calibration: Option<Table>,
}

#[derive(Debug, Clone)]
pub struct StudySection {
    pub table: Table,
    pub failures: usize,
    pub excluded: usize,
}

pub fn render_markdown(input: &ReportInput) -> String {
    let mut s = String::new();
    let mean_u = if input.entropies.is_empty() {
        0.0
    } else {
        input.entropies.iter().sum::<f64>() / input.entropies.len() as f64
    };
    let _ = writeln!(s, "# Uncertainty diagnosis report\n");
    let _ = writeln!(s, "- Run: `{}`", input.run_id);
    let _ = writeln!(s, "- Target model: `{}`", input.target_model);
    let _ = writeln!(s, "- Auxiliary model: `{}`", input.auxiliary_model);
    let _ = writeln!(s, "- Samples per question: {}", input.n_samples);
    let _ = writeln!(s, "- Threshold: U > {}\n", input.tau);

    let _ = writeln!(s, "## Quantification\n");
    let _ = writeln!(s, "- Questions: {}", input.n_questions);
    let _ = writeln!(s, "- Flagged: {}/{}", input.n_flagged, input.n_questions);
    let _ = writeln!(s, "- Mean U: {}\n", fmt_unc(mean_u));

    let _ = writeln!(s, "## Diagnosis\n");
    let mut hist = Table::new(&["Label", "Count"]);
    for (label, n) in &input.label_counts {
        hist.rows
            .push(vec![label.display_name().to_string(), n.to_string()]);
    }
    s.push_str(&hist.to_markdown());
    let _ = writeln!(s, "\nFailed to parse: {}\n", input.diagnosis_failures);

    for (title, section) in [
        ("Clarification study", &input.clarification),
        ("Knowledge injection study", &input.injection),
    ] {
        let _ = writeln!(s, "## {title}\n");
        match section {
            None => {
                let _ = writeln!(s, "Not run.\n");
            }
            Some(sec) if sec.table.is_empty() => {
                let _ = writeln!(s, "No eligible questions.\n");
            }
            Some(sec) => {
                s.push_str(&sec.table.to_markdown());
                let _ = writeln!(
                    s,
                    "\nQuestion failures: {}. Excluded after failed diagnosis: {}.\n",
                    sec.failures, sec.excluded
                );
            }
        }
    }

    let _ = writeln!(s, "## Calibration\n");
    match &input.calibration {
        Some(t) => s.push_str(&t.to_markdown()),
        None => {
            let _ = writeln!(s, "Not run.");
        }
    }
    s
}
