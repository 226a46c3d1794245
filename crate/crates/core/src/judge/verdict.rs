//! Parsing judge responses into structured verdicts.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    YesNo,
    CompletedReason,
    BinaryLabel,
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictValue {
    YesNo(bool),
    Completed { completed: bool, reason: String },
    BinaryLabel(bool),
    FreeText(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub value: VerdictValue,
    pub raw: String,
}

impl Verdict {
    /// The yes/no reading of the verdict; free text has none.
    pub fn positive(&self) -> Option<bool> {
        match &self.value {
            VerdictValue::YesNo(b) | VerdictValue::BinaryLabel(b) => Some(*b),
            VerdictValue::Completed { completed, .. } => Some(*completed),
            VerdictValue::FreeText(_) => None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("cannot read a {kind:?} verdict from response: {excerpt}")]
pub struct VerdictParseError {
    pub kind: VerdictKind,
    pub excerpt: String,
}

fn excerpt(text: &str) -> String {
    let t: String = text.chars().take(80).collect();
    if t.len() < text.len() {
        format!("{t}...")
    } else {
        t
    }
}

fn trim_decoration(text: &str) -> &str {
    text.trim_start_matches(|c: char| c.is_whitespace() || "*_`\"'“‘>#-:".contains(c))
}

fn leading_word(text: &str) -> String {
    trim_decoration(text)
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase()
}

fn yes_no_word(word: &str) -> Option<bool> {
    match word {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

static COMPLETED_LOOSE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)"?completed"?\s*[:：]\s*"?\s*(yes|no)\b"#).expect("static regex")
});

static REASON_LOOSE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?is)"?reason"?\s*[:：]\s*"((?:[^"\\]|\\.)*)""#).expect("static regex")
});

/// JSON objects embedded in `text`, outermost first.
fn json_objects(text: &str) -> Vec<serde_json::Map<String, serde_json::Value>> {
    let mut found = Vec::new();
    for (start, _) in text.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            found.push(map);
        }
    }
    found
}

fn parse_completed(text: &str) -> Option<(bool, String)> {
    for obj in json_objects(text) {
        let completed = obj
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("completed"))
            .and_then(|(_, v)| match v {
                serde_json::Value::String(s) => yes_no_word(&leading_word(s)),
                serde_json::Value::Bool(b) => Some(*b),
                _ => None,
            });
        if let Some(completed) = completed {
            let reason = obj
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("reason"))
                .map(|(_, v)| match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .unwrap_or_default();
            return Some((completed, reason));
        }
    }
    let caps = COMPLETED_LOOSE.captures(text)?;
    let completed = caps[1].eq_ignore_ascii_case("yes");
    let reason = REASON_LOOSE
        .captures(text)
        .map(|c| c[1].to_string())
        .unwrap_or_default();
    Some((completed, reason))
}

pub fn parse_verdict(text: &str, kind: VerdictKind) -> Result<Verdict, VerdictParseError> {
    let fail = || VerdictParseError {
        kind,
        excerpt: excerpt(text),
    };
    let value = match kind {
        VerdictKind::YesNo => VerdictValue::YesNo(yes_no_word(&leading_word(text)).ok_or_else(fail)?),
        VerdictKind::BinaryLabel => {
            let t = trim_decoration(text);
            let mut chars = t.chars();
            let label = match chars.next() {
                Some('1') => true,
                Some('0') => false,
                _ => return Err(fail()),
            };
            if chars.next().is_some_and(|c| c.is_ascii_digit() || c == '.') {
                return Err(fail());
            }
            VerdictValue::BinaryLabel(label)
        }
        VerdictKind::CompletedReason => {
            let (completed, reason) = parse_completed(text).ok_or_else(fail)?;
            VerdictValue::Completed { completed, reason }
        }
        VerdictKind::FreeText => VerdictValue::FreeText(text.to_string()),
    };
    Ok(Verdict {
        kind,
        value,
        raw: text.to_string(),
    })
}
