use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deliberag_core::discussion::Transcript;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn config() -> PathBuf {
    fixtures().join("run.toml")
}

fn deliberag(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deliberag"))
        .env_remove("DELIBERAG_BASE_URL")
        .arg("--config")
        .arg(config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ran(out: &Path, rounds: &str) {
    assert_eq!(code(&deliberag(out, &["ingest"])), 0);
    let o = deliberag(out, &["run", "--rounds", rounds]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn ingest_writes_corpus_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let o = deliberag(dir.path(), &["ingest"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("corpus.json").exists());
    assert!(dir.path().join("index.json").exists());
    assert!(stdout(&o).contains("regulatory: 12, safety: 9"), "{}", stdout(&o));
}

#[test]
fn missing_manifest_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = deliberag(dir.path(), &["ingest", "--manifest", "/nonexistent/manifest.json"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/manifest.json"));
}

#[test]
fn unreachable_live_backend_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("live.toml");
    let manifest = fixtures().join("corpus/manifest.json");
    fs::write(
        &cfg,
        format!(
            "manifest = {:?}\n[backend]\nmode = \"live\"\nbase_url = \"http://127.0.0.1:9\"\ntimeout_ms = 2000\n",
            manifest.display().to_string()
        ),
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_deliberag"))
        .env_remove("DELIBERAG_BASE_URL")
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "ingest"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("127.0.0.1:9"));
}

#[test]
fn zero_rounds_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&deliberag(dir.path(), &["ingest"])), 0);
    assert_eq!(code(&deliberag(dir.path(), &["run", "--rounds", "0"])), 2);
}

#[test]
fn run_needs_ingest_or_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = deliberag(dir.path(), &["run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--build-index"));
    let o = deliberag(dir.path(), &["run", "--build-index", "--rounds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn run_prints_round_lines_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&deliberag(dir.path(), &["ingest"])), 0);
    let task = "Validate whether a proposed temporary nuclear waste storage site near Winslow, Arizona, meets basic national regulatory requirements.";
    let o = deliberag(dir.path(), &["run", "--task", task, "--rounds", "10"]);
    assert_eq!(code(&o), 0);
    let lines: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("round ")).map(String::from).collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[0], "round 1/10 Intelligence: RCA=DISAGREE SEA=DISAGREE");
    assert!(lines[9].starts_with("round 10/10 Choice:"));

    let first = Transcript::from_json(&fs::read_to_string(dir.path().join("transcript.json")).unwrap()).unwrap();
    assert_eq!(first.config.task, task);
    assert!(first.completed_rounds <= 10);
    assert_eq!(code(&deliberag(dir.path(), &["run", "--task", task, "--rounds", "10"])), 0);
    let second = Transcript::from_json(&fs::read_to_string(dir.path().join("transcript.json")).unwrap()).unwrap();
    assert_eq!(first.canonical_json(), second.canonical_json());
}

#[test]
fn exhausted_script_writes_partial_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("short.json");
    fs::write(
        &script,
        r#"{"RCA": ["Fine. DECISION: AGREE", "next query"], "SEA": ["Fine.\nDECISION: AGREE"]}"#,
    )
    .unwrap();
    assert_eq!(code(&deliberag(dir.path(), &["ingest"])), 0);
    let o = deliberag(dir.path(), &["run", "--rounds", "3", "--mock-script", script.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("partial transcript"));
    let t = Transcript::from_json(&fs::read_to_string(dir.path().join("transcript.json")).unwrap()).unwrap();
    assert_eq!(t.completed_rounds, 1);
    // the first RCA reply has its decision mid-line, so it falls back
    assert!(t.rounds[0].turns[0].decision.parse_warning);
}

#[test]
fn metrics_keys_with_and_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    ran(dir.path(), "4");
    let keys = |p: &Path| -> Vec<String> {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        v.as_object().unwrap().keys().cloned().collect()
    };
    let metric_keys = ["agreement", "drift", "mapping", "prf", "relevance"];

    assert_eq!(code(&deliberag(dir.path(), &["metrics"])), 0);
    let k = keys(&dir.path().join("metrics.json"));
    assert_eq!(k.iter().filter(|k| metric_keys.contains(&k.as_str())).count(), 4);
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("round,agreement_rate,drift"));
    assert_eq!(csv.lines().count(), 5);

    let labels = dir.path().join("labels.json");
    fs::write(&labels, r#"{"RCA": ["doe-qa#1", "no-such-doc#3"], "SEA": ["usgs-winslow-geology#1"]}"#).unwrap();
    let o = deliberag(dir.path(), &["metrics", "--labels", labels.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("no-such-doc#3"));
    let k = keys(&dir.path().join("metrics.json"));
    assert_eq!(k.iter().filter(|k| metric_keys.contains(&k.as_str())).count(), 5);
}

#[test]
fn corrupted_transcript_is_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("transcript.json");
    fs::write(&t, "{\"schema_version\": 1, \"rounds\": 7}").unwrap();
    assert_eq!(code(&deliberag(dir.path(), &["metrics"])), 5);
    fs::write(&t, "not json").unwrap();
    assert_eq!(code(&deliberag(dir.path(), &["metrics"])), 5);
}

#[test]
fn report_happy_path_mismatch_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    ran(dir.path(), "10");
    assert_eq!(code(&deliberag(dir.path(), &["metrics"])), 0);
    let o = deliberag(dir.path(), &["report"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).lines().next().unwrap().starts_with("VERDICT: "));
    let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("## ")).count(), 3);
    assert!(dir.path().join("report.json").exists());

    assert_eq!(code(&deliberag(dir.path(), &["report"])), 0);
    assert_eq!(md, fs::read_to_string(dir.path().join("report.md")).unwrap());

    // metrics from a shorter run no longer match the transcript
    let other = tempfile::tempdir().unwrap();
    ran(other.path(), "3");
    assert_eq!(code(&deliberag(other.path(), &["metrics"])), 0);
    let o = deliberag(
        dir.path(),
        &["report", "--metrics", other.path().join("metrics.json").to_str().unwrap()],
    );
    assert_eq!(code(&o), 6);
}
