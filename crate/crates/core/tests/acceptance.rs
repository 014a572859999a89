//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use uqdiag_core::calibration;
use uqdiag_core::diagnosis::{self, DiagnosisConfig};
use uqdiag_core::gateway::{CachedBackend, ReplayBackend};
use uqdiag_core::intervention::reduction_metrics;
use uqdiag_core::model::{
    AnswerSample, ConfidenceMethod, ConfidenceRecord, ProviderMeta, UncertaintyLabel,
};
use uqdiag_core::pipeline;
use uqdiag_core::report::{self, Table};
use uqdiag_core::sampling::{self, build_distribution, SamplingConfig};
use uqdiag_core::store::{self, ingest_corpus};

use common::*;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'a str, &'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);

fn sample(i: usize, answer: String) -> AnswerSample {
    AnswerSample {
        question_id: "q".into(),
        sample_index: i,
        raw_text: String::new(),
        extracted_answer: answer,
        provider_meta: ProviderMeta::default(),
    }
}

fn entropy_oracle(answers: &[String]) -> (f64, f64) {
    let n = answers.len() as f64;
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    // Over clusters: -sum p ln p.
    let by_cluster = -counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>();
    // Over samples: -(1/N) sum_i ln p(a_i).
    let by_sample = -answers
        .iter()
        .map(|a| (counts[a.as_str()] as f64 / n).ln())
        .sum::<f64>()
        / n;
    (by_cluster, by_sample)
}

fn c1_entropy() -> Outcome {
    let mut rng = StdRng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=100usize);
        let k = rng.random_range(1..=n.min(10));
        let answers: Vec<String> = (0..n)
            .map(|_| format!("a{}", rng.random_range(0..k)))
            .collect();
        let samples: Vec<AnswerSample> = answers
            .iter()
            .enumerate()
            .map(|(i, a)| sample(i, a.clone()))
            .collect();
        let got = build_distribution(&samples)
            .map_err(|e| e.to_string())?
            .entropy;
        let (a, b) = entropy_oracle(&answers);
        let err = (got - a).abs().max((got - b).abs());
        worst = worst.max(err);
        if err > 1e-12 {
            return Err(format!(
                "counts from {answers:?}: got {got}, oracle {a} / {b}"
            ));
        }
    }
    for k in 1..=10usize {
        for per in [1usize, 3, 10] {
            let samples: Vec<AnswerSample> = (0..k * per)
                .map(|i| sample(i, format!("a{}", i % k)))
                .collect();
            let got = build_distribution(&samples)
                .map_err(|e| e.to_string())?
                .entropy;
            let want = if k == 1 { 0.0 } else { (k as f64).ln() };
            if got != want {
                return Err(format!(
                    "uniform K={k} x{per}: got {got}, want exactly {want}"
                ));
            }
        }
    }
    Ok(format!(
        "1000 random distributions, max |err| {worst:.1e}; boundaries exact"
    ))
}

fn rand_records(rng: &mut StdRng, n: usize, k: usize) -> Vec<ConfidenceRecord> {
    (0..n)
        .map(|i| {
            let confidence = match rng.random_range(0..3) {
                0 => rng.random_range(0.0..=1.0),
                // exact bin edges
                1 => rng.random_range(0..=k) as f64 / k as f64,
                // coarse grid, for ties
                _ => rng.random_range(0..=20) as f64 / 20.0,
            };
            ConfidenceRecord {
                question_id: format!("q{i}"),
                method: ConfidenceMethod::SelfConsistency,
                confidence,
                correct: rng.random_bool(0.5),
            }
        })
        .collect()
}

fn ece_oracle(recs: &[ConfidenceRecord], k: usize) -> f64 {
    let n = recs.len() as f64;
    let mut total = 0.0;
    for b in 0..k {
        let lo = b as f64 / k as f64;
        let hi = (b + 1) as f64 / k as f64;
        let members: Vec<&ConfidenceRecord> = recs
            .iter()
            .filter(|r| (r.confidence > lo || (b == 0 && r.confidence >= lo)) && r.confidence <= hi)
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|r| r.correct).count() as f64 / m;
        let conf = members.iter().map(|r| r.confidence).sum::<f64>() / m;
        total += m / n * (acc - conf).abs();
    }
    total
}

fn auroc_oracle(recs: &[ConfidenceRecord]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for p in recs.iter().filter(|r| r.correct) {
        for q in recs.iter().filter(|r| !r.correct) {
            pairs += 1.0;
            if p.confidence > q.confidence {
                wins += 1.0;
            } else if p.confidence == q.confidence {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn brier_oracle(recs: &[ConfidenceRecord]) -> f64 {
    let mut s = 0.0;
    for r in recs {
        let y = if r.correct { 1.0 } else { 0.0 };
        s += (r.confidence - y) * (r.confidence - y);
    }
    s / recs.len() as f64
}

fn c2_metrics() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let tol = 1e-9;
    for i in 0..500 {
        let n = rng.random_range(1..=200);
        let k = rng.random_range(1..=20);
        let recs = rand_records(&mut rng, n, k);
        let (got, want) = (calibration::ece(&recs, k).unwrap(), ece_oracle(&recs, k));
        if (got - want).abs() > tol {
            return Err(format!("ECE instance {i}: {got} vs {want}"));
        }
        let (got, want) = (calibration::brier(&recs).unwrap(), brier_oracle(&recs));
        if (got - want).abs() > tol {
            return Err(format!("Brier instance {i}: {got} vs {want}"));
        }
    }
    let mut done = 0;
    while done < 500 {
        let n = rng.random_range(2..=200);
        let recs = rand_records(&mut rng, n, 10);
        if recs.iter().all(|r| r.correct) || recs.iter().all(|r| !r.correct) {
            continue;
        }
        let (got, want) = (calibration::auroc(&recs).unwrap(), auroc_oracle(&recs));
        if (got - want).abs() > tol {
            return Err(format!("AUROC instance {done}: {got} vs {want}"));
        }
        done += 1;
    }
    Ok("500 instances each for ECE, AUROC, Brier within 1e-9".into())
}

// (before, after, printed rate)
const CLARIFY_3DP: [(f64, f64, f64); 12] = [
    (1.869, 1.176, 37.08),
    (2.005, 1.442, 28.08),
    (1.902, 1.440, 24.30),
    (1.522, 0.881, 42.09),
    (1.673, 1.133, 32.29),
    (1.572, 1.097, 30.20),
    (1.340, 0.441, 67.08),
    (1.264, 0.585, 53.75),
    (1.058, 0.511, 51.69),
    (1.171, 0.846, 27.70),
    (1.349, 1.028, 23.84),
    (1.214, 0.926, 23.72),
];

const CLARIFY_2DP: [(f64, f64, f64); 6] = [
    (1.92, 1.39, 27.73),
    (1.96, 1.51, 22.90),
    (1.91, 1.50, 21.38),
    (1.37, 0.44, 67.74),
    (1.13, 0.41, 63.60),
    (1.23, 0.66, 46.72),
];

// (unc before, acc before %, unc after, acc after %, printed rate, printed acc improvement)
const INJECT_2DP: [(f64, f64, f64, f64, f64, f64); 8] = [
    (1.83, 28.29, 1.59, 34.78, 13.26, 6.49),
    (1.81, 39.43, 1.65, 43.48, 8.97, 4.05),
    (1.76, 29.63, 0.94, 72.22, 46.51, 42.59),
    (1.39, 50.00, 1.05, 70.83, 24.63, 20.83),
    (1.90, 30.77, 1.64, 35.90, 13.64, 5.13),
    (1.88, 41.67, 1.63, 50.00, 13.45, 8.33),
    (1.77, 37.04, 0.71, 74.07, 60.01, 37.04),
    (1.58, 52.17, 1.33, 56.52, 15.69, 4.35),
];

fn c3_tables() -> Outcome {
    let tol = 0.1;
    let mut misses = Vec::new();
    let mut checked = 0;
    let mut check = |what: String, got: f64, printed: f64| {
        checked += 1;
        if (got - printed).abs() > tol {
            misses.push(format!("{what}: computed {got:.3}, printed {printed:.2}"));
        }
    };
    for (b, a, rate) in CLARIFY_3DP {
        let m = reduction_metrics((b, None), (a, None));
        check(format!("clarify {b}->{a}"), m.unc_reduction_rate, rate);
    }
    for (b, a, rate) in CLARIFY_2DP {
        let m = reduction_metrics((b, None), (a, None));
        check(format!("clarify {b}->{a}"), m.unc_reduction_rate, rate);
    }
    for (ub, ab, ua, aa, rate, imp) in INJECT_2DP {
        let m = reduction_metrics((ub, Some(ab / 100.0)), (ua, Some(aa / 100.0)));
        check(format!("inject {ub}->{ua}"), m.unc_reduction_rate, rate);
        check(
            format!("inject acc {ab}->{aa}"),
            m.acc_improvement_rate.unwrap(),
            imp,
        );
    }
    if misses.is_empty() {
        Ok(format!("{checked} printed values within 0.1 pp"))
    } else {
        Err(format!(
            "{} of {checked} printed values off by more than 0.1 pp: {}",
            misses.len(),
            misses.join("; ")
        ))
    }
}

fn c4_control_flow() -> Outcome {
    let corpus = ingest_corpus(&corpus_path()).map_err(|e| e.to_string())?;
    let backend = scripted();
    let cfg = SamplingConfig::default();
    let mut samples = Vec::new();
    let mut dists = Vec::new();
    for q in &corpus {
        let s = sampling::sample_answers(q, &cfg, &backend).map_err(|e| e.to_string())?;
        dists.push(build_distribution(&s).map_err(|e| e.to_string())?);
        samples.extend(s);
    }
    let below = dists.iter().filter(|d| d.entropy <= 0.89).count();
    let out = diagnosis::diagnose_corpus(
        &corpus,
        &dists,
        &samples,
        &DiagnosisConfig::default(),
        &backend,
    )
    .map_err(|e| e.to_string())?;
    let records: Vec<_> = out
        .iter()
        .map(|o| o.result.as_ref().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let labels: Vec<UncertaintyLabel> = records.iter().map(|r| r.label()).collect();
    let with_gap = records
        .iter()
        .filter(|r| r.knowledge_gap().is_some())
        .count();
    let extracts = backend.calls_with_suffix("#extract");
    let expected_labels = [
        UncertaintyLabel::QuestionAmbiguity,
        UncertaintyLabel::KnowledgeGaps,
        UncertaintyLabel::Both,
        UncertaintyLabel::QuestionAmbiguity,
    ];
    if below != 2
        || records.len() != 4
        || with_gap != 2
        || extracts != 2
        || labels != expected_labels
    {
        return Err(format!(
            "below tau {below}, records {}, with gap {with_gap}, extraction calls {extracts}, labels {labels:?}",
            records.len()
        ));
    }
    Ok("4 records, 2 with knowledge gap, 2 extraction calls".into())
}

fn c5_determinism(reference: &std::path::Path) -> Outcome {
    let base = snapshot(reference);
    for i in 0..2 {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = tmp.path().join("run");
        let b = scripted();
        full_pipeline(&dir, &b, &b.search_backend()).map_err(|e| e.to_string())?;
        let d = diff(&base, &snapshot(&dir));
        if !d.is_empty() {
            return Err(format!("repeat {} differs in {d:?}", i + 2));
        }
    }
    let mut points = Vec::new();
    for limit in [5, 25, 63, 70, 90, 113, 125, 130] {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = tmp.path().join("run");
        let b = scripted();
        let first = full_pipeline(&dir, FailAfter::new(&b, limit), &b.search_backend());
        if first.is_ok() {
            return Err(format!(
                "interruption after {limit} calls did not interrupt"
            ));
        }
        let b = scripted();
        full_pipeline(&dir, &b, &b.search_backend())
            .map_err(|e| format!("resume after {limit}: {e}"))?;
        let d = diff(&base, &snapshot(&dir));
        if !d.is_empty() {
            return Err(format!("resume after {limit} calls differs in {d:?}"));
        }
        points.push(limit.to_string());
    }
    Ok(format!(
        "3 runs identical; resumed runs identical (interrupted after {} calls)",
        points.join("/")
    ))
}

fn c6_ordering(reference: &std::path::Path) -> Outcome {
    let text = std::fs::read_to_string(reference.join(report::CLARIFICATION_CSV))
        .map_err(|e| e.to_string())?;
    let table = Table::from_csv(&text).map_err(|e| e.to_string())?;
    let col = |name: &str| table.header.iter().position(|h| h == name).unwrap();
    let rate_of = |label: UncertaintyLabel| -> Result<f64, String> {
        table
            .rows
            .iter()
            .find(|r| r[col("Label")] == label.display_name())
            .ok_or_else(|| format!("no {label} row"))?[col("Unc. Reduction Rate (%)")]
        .parse::<f64>()
        .map_err(|e| e.to_string())
    };
    let amb = rate_of(UncertaintyLabel::QuestionAmbiguity)?;
    let both = rate_of(UncertaintyLabel::Both)?;
    let gaps = rate_of(UncertaintyLabel::KnowledgeGaps)?;
    if amb > both && both > gaps {
        Ok(format!(
            "Ambiguity {amb:.2} > Both {both:.2} > Gaps {gaps:.2}"
        ))
    } else {
        Err(format!(
            "Ambiguity {amb:.2}, Both {both:.2}, Gaps {gaps:.2}"
        ))
    }
}

fn c7_calibration() -> Outcome {
    // Ten records per confidence level, with exactly that fraction correct.
    let mut recs = Vec::new();
    for level in 1..=9 {
        let conf = level as f64 / 10.0;
        for j in 0..10 {
            let correct = j < level;
            let id = format!("q{level}_{j}");
            recs.push(ConfidenceRecord {
                question_id: id.clone(),
                method: ConfidenceMethod::SelfConsistency,
                confidence: conf,
                correct,
            });
            recs.push(ConfidenceRecord {
                question_id: id,
                method: ConfidenceMethod::Verbalization,
                confidence: (conf + 0.2).min(1.0),
                correct,
            });
        }
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = tmp.path().join("records.csv");
    std::fs::write(&path, report::confidences_csv(&recs)).map_err(|e| e.to_string())?;
    let loaded = report::read_confidences(&path).map_err(|e| e.to_string())?;
    let (reports, errors) = pipeline::calibrate(&loaded, 10);
    if !errors.is_empty() {
        return Err(format!("{errors:?}"));
    }
    let table = report::calibration_table(&reports);
    let get = |m: ConfidenceMethod| reports.iter().find(|r| r.method == m).unwrap();
    let sc = get(ConfidenceMethod::SelfConsistency);
    let verb = get(ConfidenceMethod::Verbalization);
    let ppl_dashed = table.rows[1][1] == "-";
    if sc.ece < verb.ece && sc.brier < verb.brier && ppl_dashed {
        Ok(format!(
            "SC ECE {:.4} < VERB {:.4}; SC Brier {:.4} < VERB {:.4}",
            sc.ece, verb.ece, sc.brier, verb.brier
        ))
    } else {
        Err(format!(
            "SC {sc:?} vs VERB {verb:?}; PPL dashed: {ppl_dashed}"
        ))
    }
}

fn c8_cache(reference: &std::path::Path) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("run");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    std::fs::copy(reference.join(store::CACHE), dir.join(store::CACHE))
        .map_err(|e| e.to_string())?;
    let replay =
        ReplayBackend::from_file(&reference.join(store::CACHE)).map_err(|e| e.to_string())?;
    let counter = CachedBackend::in_memory(&replay);
    let b = scripted();
    let calls = full_pipeline(&dir, &counter, &b.search_backend()).map_err(|e| e.to_string())?;
    let reached = counter.provider_calls();
    let d = diff(&snapshot(reference), &snapshot(&dir));
    if calls == 0 && reached == 0 && d.is_empty() {
        Ok("0 backend calls, run directory identical".into())
    } else {
        Err(format!(
            "{calls} provider calls ({reached} reached replay); differing files {d:?}"
        ))
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let reference = tmp.path().join("run");
    let b = scripted();
    let reference_ok =
        full_pipeline(&reference, &b, &b.search_backend()).map_err(|e| e.to_string());
    let (reference_ok, reference) = (&reference_ok, reference.as_path());

    let needs_reference = |f: fn(&std::path::Path) -> Outcome| -> Box<dyn Fn() -> Outcome + '_> {
        Box::new(move || match reference_ok {
            Ok(_) => f(reference),
            Err(e) => Err(format!("reference run failed: {e}")),
        })
    };

    let criteria: Vec<Criterion<'_>> = vec![
        (
            "1",
            "entropy oracle",
            Duration::from_secs(5),
            Box::new(c1_entropy),
        ),
        (
            "2",
            "metric oracles",
            Duration::from_secs(10),
            Box::new(c2_metrics),
        ),
        (
            "3",
            "table arithmetic",
            Duration::from_secs(1),
            Box::new(c3_tables),
        ),
        (
            "4",
            "diagnosis control flow",
            Duration::from_secs(5),
            Box::new(c4_control_flow),
        ),
        (
            "5",
            "replay determinism",
            Duration::from_secs(30),
            needs_reference(c5_determinism),
        ),
        (
            "6",
            "clarification ordering",
            Duration::from_secs(10),
            needs_reference(c6_ordering),
        ),
        (
            "7",
            "calibration ranking",
            Duration::from_secs(5),
            Box::new(c7_calibration),
        ),
        (
            "8",
            "cache transparency",
            Duration::from_secs(30),
            needs_reference(c8_cache),
        ),
    ];

    let mut failed = 0;
    for (id, name, budget, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > *budget => {
                Err(format!("{msg} but took {took:.2?} (budget {budget:?})"))
            }
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS criterion {id} ({name}) [{took:.2?}]: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}) [{took:.2?}]: {msg}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
