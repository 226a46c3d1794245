#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

pub const FIXTURE_DBS: [&str; 4] = ["school", "concert", "movie_platform", "california_schools"];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn build_db(dir: &Path, name: &str) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let script = fs::read_to_string(fixture_dir().join("db").join(format!("{name}.sql"))).unwrap();
    let path = dir.join(format!("{name}.sqlite"));
    let conn = rusqlite::Connection::open(&path).unwrap();
    conn.execute_batch(&script).unwrap();
    path
}

pub fn build_root(root: &Path) -> PathBuf {
    for name in FIXTURE_DBS {
        build_db(&root.join(name), name);
    }
    root.to_path_buf()
}

pub fn corpus(name: &str) -> PathBuf {
    fixture_dir().join("corpus").join(name)
}

/// Body of a `### Header:` section: the lines after it up to the next
/// `###` line.
pub fn section(prompt: &str, header: &str) -> String {
    let Some(start) = prompt.find(header) else {
        return String::new();
    };
    let rest = &prompt[start + header.len()..];
    rest.lines()
        .skip(1)
        .take_while(|l| !l.starts_with("###"))
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

/// Table names declared in a serialized schema.
pub fn schema_tables(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| l.strip_prefix("CREATE TABLE "))
        .filter_map(|l| l.strip_suffix(" ("))
        .map(str::to_string)
        .collect()
}

fn bucket(prompt: &str, modulo: u8) -> u8 {
    let h = t2sql_core::artifact::sha256_hex(prompt.as_bytes());
    u8::from_str_radix(&h[..2], 16).unwrap() % modulo
}

/// A deterministic stand-in for every prompt the pipeline sends. Answers
/// depend only on the prompt text, so a recording replays exactly.
pub fn scripted_response(call: &t2sql_core::JudgeCall) -> Result<String, t2sql_core::judge::GatewayError> {
    let p = call.prompt.as_str();
    let tables = schema_tables(p);
    let first = tables.first().cloned().unwrap_or_else(|| "sqlite_master".into());
    let out = match call.template_id.as_str() {
        "extract-keywords" => {
            let q = section(p, "### Question:");
            let words: Vec<String> = t2sql_core::text::tokenize(&q).into_iter().filter(|w| w.len() > 3).collect();
            words.join(", ")
        }
        "second-filter" => tables.iter().map(|t| format!("{t}:")).collect::<Vec<_>>().join("\n"),
        "fluency-check" | "similarity-check" => "Yes".into(),
        "multi-llm-check" => {
            if bucket(p, 5) == 0 {
                r#"{"Completed": "No", "Reason": "misses a condition"}"#.into()
            } else {
                r#"{"Completed": "Yes", "Reason": "matches the question"}"#.into()
            }
        }
        "finetune-check" => "1".into(),
        "query-diffusion" => {
            let q = section(p, "### Question:");
            format!("Please tell me: {q}\nI would like to know: {q}")
        }
        "example-diffusion" => format!("Question: How many rows does {first} have?\nSQL: SELECT count(*) FROM {first}"),
        "sql-interpret" => "The query reads the listed tables and returns the selected columns.".into(),
        "sql-summarize" => format!("Question: What does the query return from {first}?"),
        "query2sql" => format!(
            "Question: How many rows does {first} have?\nSQL: SELECT count(*) FROM {first}\n\nQuestion: Show every row of {first}.\nSQL: SELECT * FROM {first}"
        ),
        "semantic-suggest" => {
            if bucket(p, 2) == 0 {
                t2sql_core::correct::NO_CHANGE_SENTINEL.into()
            } else {
                "Check the filter values against the matched contents.".into()
            }
        }
        "semantic-fix" => section(p, "### Buggy SQLite QUERY:"),
        "syntax-fix" => section(p, "### Buggy SQLite QUERY:").replace("SELEC ", "SELECT ").replace(" FORM ", " FROM "),
        "ensemble-select" => if bucket(p, 3) == 0 { "B" } else { "A" }.into(),
        other => format!("unexpected template {other}"),
    };
    Ok(out)
}
