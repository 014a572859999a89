//! Calibration metrics over (confidence, correctness) pairs: expected
//! calibration error, AUROC and Brier score.
//!
//! ECE bins are equal-width over [0, 1]. The first bin is closed on both
//! ends, `[0, 1/K]`; every later bin is `(k/K, (k+1)/K]`. Edges are computed
//! as `k as f64 / K as f64` everywhere so the convention is bit-exact.
//!
//! AUROC ranks by confidence (higher = more likely correct) and counts ties
//! as half a win, i.e. the Mann–Whitney U statistic normalized by the number
//! of correct/incorrect pairs.

use serde::{Deserialize, Serialize};

use crate::model::{ConfidenceMethod, ConfidenceRecord};

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("no confidence records")]
    EmptyRecords,
    #[error("AUROC needs at least one correct and one incorrect record")]
    DegenerateClasses,
    #[error("number of bins must be >= 1")]
    InvalidBins,
    #[error("{question_id}: confidence {value} is outside [0, 1]")]
    InvalidConfidence { question_id: String, value: f64 },
    #[error("{method}: {source}")]
    Method {
        method: ConfidenceMethod,
        #[source]
        source: Box<CalibrationError>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: ConfidenceMethod,
    pub n: usize,
    pub ece: f64,
    pub auroc: f64,
    pub brier: f64,
    pub n_bins: usize,
}

fn check(records: &[ConfidenceRecord]) -> Result<(), CalibrationError> {
    if records.is_empty() {
        return Err(CalibrationError::EmptyRecords);
    }
    for r in records {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(CalibrationError::InvalidConfidence {
                question_id: r.question_id.clone(),
                value: r.confidence,
            });
        }
    }
    Ok(())
}

fn indicator(correct: bool) -> f64 {
    if correct {
        1.0
    } else {
        0.0
    }
}

/// Index of the bin holding confidence `c` among `k` bins.
pub fn bin_index(c: f64, k: usize) -> usize {
    let edge = |i: usize| i as f64 / k as f64;
    let mut i = ((c * k as f64).ceil() as usize)
        .saturating_sub(1)
        .min(k - 1);
    while i > 0 && c <= edge(i) {
        i -= 1;
    }
    while i + 1 < k && c > edge(i + 1) {
        i += 1;
    }
    i
}

pub fn ece(records: &[ConfidenceRecord], n_bins: usize) -> Result<f64, CalibrationError> {
    if n_bins == 0 {
        return Err(CalibrationError::InvalidBins);
    }
    check(records)?;
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut correct_sum = vec![0.0f64; n_bins];
    for r in records {
        let b = bin_index(r.confidence, n_bins);
        count[b] += 1;
        conf_sum[b] += r.confidence;
        correct_sum[b] += indicator(r.correct);
    }
    let n = records.len() as f64;
    let total = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct_sum[b] / m - conf_sum[b] / m).abs()
        })
        .sum();
    Ok(total)
}

pub fn auroc(records: &[ConfidenceRecord]) -> Result<f64, CalibrationError> {
    check(records)?;
    let n_pos = records.iter().filter(|r| r.correct).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CalibrationError::DegenerateClasses);
    }
    let mut sorted: Vec<&ConfidenceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));

    // Sum of 1-based midranks of the correct records.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].confidence == sorted[i].confidence {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = sorted[i..=j].iter().filter(|r| r.correct).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let p = n_pos as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n_neg as f64))
}

pub fn brier(records: &[ConfidenceRecord]) -> Result<f64, CalibrationError> {
    check(records)?;
    let sum: f64 = records
        .iter()
        .map(|r| (r.confidence - indicator(r.correct)).powi(2))
        .sum();
    Ok(sum / records.len() as f64)
}

/// All three metrics for one method's records.
pub fn report(
    method: ConfidenceMethod,
    records: &[ConfidenceRecord],
    n_bins: usize,
) -> Result<CalibrationReport, CalibrationError> {
    Ok(CalibrationReport {
        method,
        n: records.len(),
        ece: ece(records, n_bins)?,
        auroc: auroc(records)?,
        brier: brier(records)?,
        n_bins,
    })
}

/// One report per method present in `records`, in VERB, PPL, SC order.
/// Methods with no records are omitted.
pub fn method_comparison(
    records: &[ConfidenceRecord],
    n_bins: usize,
) -> Result<Vec<CalibrationReport>, CalibrationError> {
    ConfidenceMethod::ALL
        .into_iter()
        .filter_map(|method| {
            let subset: Vec<ConfidenceRecord> = records
                .iter()
                .filter(|r| r.method == method)
                .cloned()
                .collect();
            (!subset.is_empty()).then(|| {
                report(method, &subset, n_bins).map_err(|e| CalibrationError::Method {
                    method,
                    source: Box::new(e),
                })
            })
        })
        .collect()
}
