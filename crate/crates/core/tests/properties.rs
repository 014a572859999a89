use proptest::prelude::*;

use uqdiag_core::calibration::{auroc, bin_index, brier, ece};
use uqdiag_core::diagnosis::{filter_high_uncertainty, parse_label};
use uqdiag_core::intervention::{acc_improvement_rate, unc_reduction_rate};
use uqdiag_core::model::{
    AnswerSample, ConfidenceMethod, ConfidenceRecord, DiagnosisRecord, ProviderMeta, Question,
    UncertaintyLabel,
};
use uqdiag_core::sampling::{
    build_distribution, entropy_from_counts, extract_answer, perplexity_confidence,
    self_consistency_confidence, ExtractionMode, Normalization,
};

fn sample(qid: &str, i: usize, answer: &str) -> AnswerSample {
    AnswerSample {
        question_id: qid.into(),
        sample_index: i,
        raw_text: format!("Answer: {answer}"),
        extracted_answer: answer.into(),
        provider_meta: ProviderMeta::default(),
    }
}

fn records(pairs: &[(f64, bool)]) -> Vec<ConfidenceRecord> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(confidence, correct))| ConfidenceRecord {
            question_id: format!("q{i}"),
            method: ConfidenceMethod::SelfConsistency,
            confidence,
            correct,
        })
        .collect()
}

fn counts() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..20, 1..8)
}

fn both_classes() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0.0f64..=1.0, any::<bool>()), 2..60)
        .prop_filter("needs both classes", |v| {
            v.iter().any(|p| p.1) && v.iter().any(|p| !p.1)
        })
}

proptest! {
    #[test]
    fn entropy_bounded(c in counts()) {
        let h = entropy_from_counts(&c);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (c.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn entropy_permutation_invariant(c in counts(), seed in any::<u64>()) {
        let mut shuffled = c.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7919) % (i + 1));
        }
        prop_assert!((entropy_from_counts(&c) - entropy_from_counts(&shuffled)).abs() < 1e-12);
    }

    #[test]
    fn splitting_a_cluster_raises_entropy(mut c in counts(), at in any::<prop::sample::Index>()) {
        let i = at.index(c.len());
        prop_assume!(c[i] >= 2);
        let before = entropy_from_counts(&c);
        let half = c[i] / 2;
        c[i] -= half;
        c.push(half);
        prop_assert!(entropy_from_counts(&c) > before);
    }

    #[test]
    fn distribution_matches_counts(answers in prop::collection::vec(0u8..5, 1..30)) {
        let samples: Vec<AnswerSample> = answers
            .iter()
            .enumerate()
            .map(|(i, a)| sample("q", i, &((b'A' + a) as char).to_string()))
            .collect();
        let d = build_distribution(&samples).unwrap();
        prop_assert_eq!(d.n_samples, answers.len());
        prop_assert_eq!(d.clusters.iter().map(|c| c.count).sum::<usize>(), answers.len());
        let p: f64 = d.clusters.iter().map(|c| c.probability).sum();
        prop_assert!((p - 1.0).abs() < 1e-9);
        let cs: Vec<usize> = d.clusters.iter().map(|c| c.count).collect();
        prop_assert_eq!(d.entropy, entropy_from_counts(&cs));
        prop_assert_eq!(self_consistency_confidence(&d), d.majority_confidence);
    }

    #[test]
    fn sample_order_does_not_change_distribution(answers in prop::collection::vec(0u8..4, 1..20)) {
        let samples: Vec<AnswerSample> = answers
            .iter()
            .enumerate()
            .map(|(i, a)| sample("q", i, &((b'A' + a) as char).to_string()))
            .collect();
        let mut rev = samples.clone();
        rev.reverse();
        prop_assert_eq!(build_distribution(&samples).unwrap(), build_distribution(&rev).unwrap());
    }

    #[test]
    fn filter_is_strict(entropies in prop::collection::vec(0.0f64..2.5, 0..20), tau in 0.1f64..2.0) {
        let dists: Vec<_> = entropies
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let mut d = build_distribution(&[sample(&format!("q{i}"), 0, "A")]).unwrap();
                d.entropy = e;
                d
            })
            .collect();
        let kept = filter_high_uncertainty(&dists, tau);
        let expected: Vec<String> = entropies
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > tau)
            .map(|(i, _)| format!("q{i}"))
            .collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn perplexity_of_constant_is_constant(p in 0.001f64..=1.0, n in 1usize..50) {
        let v = perplexity_confidence(&vec![p; n]).unwrap();
        prop_assert!((v - p).abs() < 1e-9);
    }

    #[test]
    fn perplexity_between_min_and_max(ps in prop::collection::vec(0.001f64..=1.0, 1..40)) {
        let v = perplexity_confidence(&ps).unwrap();
        let lo = ps.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ps.iter().cloned().fold(0.0, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn bin_index_respects_edges(c in 0.0f64..=1.0, k in 1usize..40) {
        let i = bin_index(c, k);
        prop_assert!(i < k);
        let lo = i as f64 / k as f64;
        let hi = (i + 1) as f64 / k as f64;
        if i == 0 {
            prop_assert!(c <= hi);
        } else {
            prop_assert!(c > lo && c <= hi);
        }
    }

    #[test]
    fn metrics_in_range(v in both_classes(), k in 1usize..20) {
        let r = records(&v);
        let e = ece(&r, k).unwrap();
        let a = auroc(&r).unwrap();
        let b = brier(&r).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn auroc_invariant_under_monotone_map(v in both_classes()) {
        let r = records(&v);
        let squashed: Vec<(f64, bool)> = v.iter().map(|&(c, y)| (c * c * c, y)).collect();
        let a = auroc(&r).unwrap();
        let b = auroc(&records(&squashed)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auroc_flips_under_label_swap(v in both_classes()) {
        let swapped: Vec<(f64, bool)> = v.iter().map(|&(c, y)| (c, !y)).collect();
        let a = auroc(&records(&v)).unwrap();
        let b = auroc(&records(&swapped)).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn brier_and_ece_permutation_invariant(v in both_classes()) {
        let mut rev = v.clone();
        rev.reverse();
        prop_assert!((brier(&records(&v)).unwrap() - brier(&records(&rev)).unwrap()).abs() < 1e-12);
        prop_assert!((ece(&records(&v), 10).unwrap() - ece(&records(&rev), 10).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn reduction_rate_signs(b in 0.01f64..3.0, a in 0.0f64..3.0) {
        let r = unc_reduction_rate(b, a);
        prop_assert_eq!(r > 0.0, a < b);
        prop_assert!(r <= 100.0);
        prop_assert!((acc_improvement_rate(a / 3.0, b / 3.0) + acc_improvement_rate(b / 3.0, a / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn extraction_is_deterministic(raw in ".{0,200}") {
        let q = Question::new("q", "Which?", "d").with_choices([("A", "red"), ("B", "blue"), ("C", "green")]);
        let norm = Normalization::default();
        let first = extract_answer(&raw, &q, ExtractionMode::Auto, norm);
        prop_assert_eq!(&first, &extract_answer(&raw, &q, ExtractionMode::Auto, norm));
        let open = Question::new("o", "What?", "d");
        let first = extract_answer(&raw, &open, ExtractionMode::Auto, norm);
        prop_assert_eq!(&first, &extract_answer(&raw, &open, ExtractionMode::Auto, norm));
    }

    #[test]
    fn marked_letter_is_extracted(idx in 0usize..3, prefix in "[a-z ]{0,40}") {
        let q = Question::new("q", "Which?", "d").with_choices([("A", "red"), ("B", "blue"), ("C", "green")]);
        let letter = ["A", "B", "C"][idx];
        let raw = format!("{prefix}\nAnswer: {letter}");
        prop_assert_eq!(extract_answer(&raw, &q, ExtractionMode::Auto, Normalization::default()), letter);
    }

    #[test]
    fn label_line_wins(idx in 0usize..3, noise in "[a-z ]{0,60}") {
        let label = UncertaintyLabel::REPORT_ORDER[idx];
        let reply = format!("{noise}\nLabel: {}", label.display_name());
        prop_assert_eq!(parse_label(&reply), Some(label));
    }

    #[test]
    fn diagnosis_record_round_trips(idx in 0usize..3, gap in "[a-z ]{1,30}", why in "[a-z ]{0,30}") {
        let label = UncertaintyLabel::REPORT_ORDER[idx];
        let gap = label.needs_knowledge().then(|| gap.clone());
        let rec = DiagnosisRecord::new("q1", label, why, gap, "aux").unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        let back: DiagnosisRecord = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, rec);
    }

    #[test]
    fn sample_round_trips(text in ".{0,80}", i in 0usize..100) {
        let s = sample("q", i, &text);
        let back: AnswerSample = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }
}

#[test]
fn record_without_gap_rejected_when_gap_required() {
    let json =
        r#"{"question_id":"q","label":"KnowledgeGaps","rationale":"r","auxiliary_model":"m"}"#;
    assert!(serde_json::from_str::<DiagnosisRecord>(json).is_err());
}
