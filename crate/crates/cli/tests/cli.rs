use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DBS: [&str; 4] = ["school", "concert", "movie_platform", "california_schools"];

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Fixture databases plus the training corpus, laid out under `dir`.
fn workspace(dir: &Path) -> (PathBuf, PathBuf) {
    let root = dir.join("dbs");
    for name in DBS {
        let db_dir = root.join(name);
        fs::create_dir_all(&db_dir).unwrap();
        let script = fs::read_to_string(fixtures().join("db").join(format!("{name}.sql"))).unwrap();
        let conn = rusqlite::Connection::open(db_dir.join(format!("{name}.sqlite"))).unwrap();
        conn.execute_batch(&script).unwrap();
    }
    let train = dir.join("train.json");
    fs::copy(fixtures().join("corpus/train.json"), &train).unwrap();
    (root, train)
}

fn t2sql(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t2sql"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_db_root_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, train) = workspace(dir.path());
    let train = train.to_str().unwrap();
    let out = t2sql(dir.path(), &["--db-root", "no/such/dir", "ingest", "--dataset", train]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let out = t2sql(dir.path(), &["ingest", "--dataset", train]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn bad_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (root, train) = workspace(dir.path());
    let cfg = dir.path().join("pipeline.toml");
    fs::write(&cfg, format!("db_root = {:?}\nno_such_key = 1\n", root.display().to_string())).unwrap();
    let out = t2sql(dir.path(), &["--config", "pipeline.toml", "ingest", "--dataset", train.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let key = "[endpoints.judge]\nbase_url = \"http://localhost\"\nmodel = \"m\"\napi_key = \"secret\"\n";
    fs::write(&cfg, format!("db_root = {:?}\n{key}", root.display().to_string())).unwrap();
    let out = t2sql(dir.path(), &["--config", "pipeline.toml", "ingest", "--dataset", train.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn jobs_zero_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, train) = workspace(dir.path());
    let out = t2sql(dir.path(), &["--db-root", "dbs", "--jobs", "0", "ingest", "--dataset", train.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn link_then_resume_skips() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let args = ["--db-root", "dbs", "link", "--dataset", "train.json"];
    let first = t2sql(dir.path(), &args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let out = dir.path().join("run/link_results.jsonl");
    let before = fs::read(&out).unwrap();
    assert_eq!(String::from_utf8_lossy(&before).lines().count(), 20);

    let mut resumed = vec!["--resume"];
    resumed.extend(args);
    let second = t2sql(dir.path(), &resumed);
    assert_eq!(code(&second), 0, "{}", stderr(&second));
    assert!(stderr(&second).contains("skipped"), "{}", stderr(&second));
    assert_eq!(fs::read(&out).unwrap(), before);

    // A changed input invalidates the entry.
    let mut text = fs::read_to_string(dir.path().join("train.json")).unwrap();
    text = text.replace("How many schools are there?", "How many schools exist?");
    fs::write(dir.path().join("train.json"), text).unwrap();
    let third = t2sql(dir.path(), &resumed);
    assert_eq!(code(&third), 0, "{}", stderr(&third));
    assert!(!stderr(&third).contains("skipped"), "{}", stderr(&third));
}

#[test]
fn stage_failure_exits_one_and_marks_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let ok = t2sql(dir.path(), &["--db-root", "dbs", "ingest", "--dataset", "train.json"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let records = fs::read(dir.path().join("run/records.jsonl")).unwrap();

    let out = t2sql(
        dir.path(),
        &["--db-root", "dbs", "eval", "--gold", "train.json", "--pred", "missing.jsonl"],
    );
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(!dir.path().join("run/eval_report.json").exists());
    assert_eq!(fs::read(dir.path().join("run/records.jsonl")).unwrap(), records);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    let stages = manifest["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 2);
    assert_eq!(stages[0]["status"], "ok");
    assert_eq!(stages[1]["stage"], "eval");
    assert_eq!(stages[1]["status"], "failed");
    assert!(stages[1]["error"].as_str().unwrap().contains("missing.jsonl"));

    let rep = t2sql(dir.path(), &["report"]);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    let text = String::from_utf8_lossy(&rep.stdout);
    assert!(text.contains("FAILED") && text.contains("gaps:"), "{text}");
}

#[test]
fn eval_prints_the_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    fs::copy(fixtures().join("corpus/gold_predictions.jsonl"), dir.path().join("pred.jsonl")).unwrap();
    let out = t2sql(dir.path(), &["--db-root", "dbs", "eval", "--gold", "train.json", "--pred", "pred.jsonl"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    for col in ["simple", "moderate", "challenging", "total"] {
        assert!(table.contains(col), "{table}");
    }
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/eval_report.json")).unwrap()).unwrap();
    assert_eq!(rep["breakdown"]["total"]["ex"], 1.0);

    let report = t2sql(dir.path(), &["report", "--out", "report.json"]);
    assert_eq!(code(&report), 0, "{}", stderr(&report));
    assert!(String::from_utf8_lossy(&report.stdout).contains("EX for"));
    assert!(dir.path().join("report.json").is_file());
}

#[test]
fn report_on_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("run")).unwrap();
    fs::write(dir.path().join("run/manifest.json"), "").unwrap();
    let out = t2sql(dir.path(), &["report"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("no stages recorded"));

    let missing = t2sql(dir.path(), &["--manifest", "nope.json", "report"]);
    assert_eq!(code(&missing), 1, "{}", stderr(&missing));
}

#[test]
fn record_needs_the_live_backend() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let out = t2sql(dir.path(), &["--db-root", "dbs", "--record", "ingest", "--dataset", "train.json"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
