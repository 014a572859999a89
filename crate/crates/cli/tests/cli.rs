use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn uqdiag(run: &Path, args: &[&str]) -> Output {
    let fixture = fixtures().join("scripted.json");
    Command::new(env!("CARGO_BIN_EXE_uqdiag"))
        .arg("--run")
        .arg(run)
        .args(["--backend", "scripted", "--fixture"])
        .arg(&fixture)
        .args(args)
        .env_remove("UQDIAG_API_KEY")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus() -> String {
    fixtures().join("corpus.jsonl").display().to_string()
}

fn quantified(dir: &Path, extra: &[&str]) -> Output {
    let corpus = corpus();
    let mut args = vec!["quantify", "--corpus", &corpus];
    args.extend_from_slice(extra);
    let o = uqdiag(dir, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or_else(|_| panic!("not a number: {s}"))
}

#[test]
fn quantify_flags_fixture_questions() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = quantified(&run, &[]);
    assert!(stdout(&o).contains("flagged 4/6"), "{}", stdout(&o));
}

#[test]
fn empty_corpus_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = uqdiag(
        &tmp.path().join("run"),
        &["quantify", "--corpus", empty.to_str().unwrap()],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error:"));
}

#[test]
fn diagnose_needs_quantify_first() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = uqdiag(&run, &["diagnose"]);
    assert!(!o.status.success());

    quantified(&run, &[]);
    let o = uqdiag(&run, &["validate", "--study", "clarify"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("diagnose"), "{}", stderr(&o));
}

#[test]
fn injection_without_eligible_questions_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = quantified(&run, &["--tau", "5"]);
    assert!(stdout(&o).contains("flagged 0/6"));
    let o = uqdiag(&run, &["diagnose"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = uqdiag(&run, &["validate", "--study", "inject"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("no eligible questions"));
    let table = rows(&run.join("injection.csv"));
    assert_eq!(table.len(), 1);
    assert_eq!(table[0][0], "Dataset");
}

#[test]
fn changed_tau_on_existing_run_is_a_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    quantified(&run, &[]);
    let o = uqdiag(&run, &["diagnose", "--tau", "0.5"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
}

#[test]
fn rerun_uses_cache_only() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    quantified(&run, &[]);
    let o = uqdiag(&run, &["quantify"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("provider calls: 0"), "{}", stdout(&o));
}

#[test]
fn study_csvs_are_self_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    quantified(&run, &[]);
    for args in [
        &["diagnose"][..],
        &["validate", "--study", "clarify"],
        &["validate", "--study", "inject"],
        &["report"],
    ] {
        let o = uqdiag(&run, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }

    let clar = rows(&run.join("clarification.csv"));
    assert!(clar.len() > 1);
    for r in &clar[1..] {
        let (b, a) = (num(&r[3]), num(&r[4]));
        assert!((num(&r[5]) - (b - a)).abs() <= 0.0005 + 1e-9, "{r:?}");
        assert!(
            (num(&r[6]) - 100.0 * (b - a) / b).abs() <= 0.005 + 1e-9,
            "{r:?}"
        );
    }

    let inj = rows(&run.join("injection.csv"));
    assert!(inj.len() > 1);
    for r in &inj[1..] {
        let (ub, ab, ua, aa) = (num(&r[2]), num(&r[3]), num(&r[4]), num(&r[5]));
        assert!(
            (num(&r[6]) - 100.0 * (ub - ua) / ub).abs() <= 0.005 + 1e-9,
            "{r:?}"
        );
        assert!((num(&r[7]) - (aa - ab)).abs() <= 0.005 + 1e-9, "{r:?}");
    }

    assert!(run.join("report.md").exists());
}

#[test]
fn calibrate_records_with_missing_method_prints_dash() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("conf.csv");
    let mut body = String::from("question_id,method,confidence,correct\n");
    for (i, (c, y)) in [
        (0.9, true),
        (0.8, true),
        (0.3, false),
        (0.6, false),
        (0.7, true),
    ]
    .iter()
    .enumerate()
    {
        body.push_str(&format!("q{i},SC,{c},{y}\n"));
        body.push_str(&format!("q{i},VERB,{},{y}\n", (c + 0.1f64).min(1.0)));
    }
    std::fs::write(&csv, body).unwrap();
    let o = uqdiag(
        &tmp.path().join("unused"),
        &["calibrate", "--records", csv.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let ppl = out.lines().find(|l| l.contains("PPL")).expect("PPL row");
    assert!(ppl.contains('-'), "{out}");
    assert!(out.lines().any(|l| l.contains("SC")));
}

#[test]
fn calibrate_rejects_malformed_records() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("bad.csv");
    std::fs::write(
        &csv,
        "question_id,method,confidence,correct\nq1,SC,1.7,true\n",
    )
    .unwrap();
    let o = uqdiag(
        &tmp.path().join("unused"),
        &["calibrate", "--records", csv.to_str().unwrap()],
    );
    assert!(!o.status.success());
}
