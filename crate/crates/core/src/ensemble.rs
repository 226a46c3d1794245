//! Multiple-choice selection over execution-distinct candidates, with a
//! majority-vote fallback.

use std::path::PathBuf;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::Artifact;
use crate::dataset::{join_evidence, ModelHandle};
use crate::exec::{ex_match, execute_with, group_by_execution, CandidateSql, ExecConfig, ExecutionGroup};
use crate::judge::{template, JudgeClient};
use crate::par::{self, ExecMode};

pub const PREVIEW_ROWS: usize = 10;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("record `{0}` has no candidates")]
    NoCandidates(String),
    #[error("option sheet is empty")]
    EmptySheet,
    #[error("prompt rendering failed: {0}")]
    Render(String),
}

/// Option label for a zero-based index: A..Z, then AA, AB, ...
pub fn option_letter(index: usize) -> String {
    let mut n = index + 1;
    let mut out = Vec::new();
    while n > 0 {
        n -= 1;
        out.push(b'A' + (n % 26) as u8);
        n /= 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii letters")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionEntry {
    pub letter: String,
    pub candidate_index: usize,
    pub sql: String,
    pub preview: String,
    pub group_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptionSheet {
    pub options: Vec<OptionEntry>,
}

impl OptionSheet {
    pub fn render(&self) -> String {
        self.options
            .iter()
            .map(|o| format!("{}: {}\nExecution result(top 10 lines): {}", o.letter, o.sql, o.preview))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn letters(&self) -> Vec<&str> {
        self.options.iter().map(|o| o.letter.as_str()).collect()
    }

    pub fn get(&self, letter: &str) -> Option<&OptionEntry> {
        self.options.iter().find(|o| o.letter == letter)
    }
}

/// One option per group, in group order. Candidates must carry outcomes.
pub fn build_options(groups: &[ExecutionGroup], candidates: &[CandidateSql]) -> OptionSheet {
    OptionSheet {
        options: groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let c = &candidates[g.representative];
                OptionEntry {
                    letter: option_letter(i),
                    candidate_index: g.representative,
                    sql: c.sql.trim().to_string(),
                    preview: c.outcome.as_ref().map(|o| o.preview(PREVIEW_ROWS)).unwrap_or_default(),
                    group_size: g.members.len(),
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Judge,
    VoteFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub record_id: String,
    pub chosen_letter: String,
    pub chosen_sql: String,
    pub method: SelectionMethod,
    #[serde(default)]
    pub judge_raw: String,
    pub option_count: usize,
}

impl Artifact for SelectionOutcome {
    const KIND: &'static str = "selection_outcome";
}

/// Largest group wins; ties go to the lower representative index.
pub fn majority_vote(groups: &[ExecutionGroup]) -> Result<usize, EnsembleError> {
    groups
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            a.members
                .len()
                .cmp(&b.members.len())
                .then(b.representative.cmp(&a.representative))
        })
        .map(|(i, _)| i)
        .ok_or(EnsembleError::EmptySheet)
}

static LETTER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^[\s*_`#>:]*(?i:(?:the\s+)?(?:answer|option|choice)(?:\s+is)?\s*[:：]?\s*)?[\s*_`(]*([A-Z]{1,3})\b")
        .expect("static regex")
});

/// Leading option letter of a response, if it names one of `letters`.
pub fn parse_letter(response: &str, letters: &[&str]) -> Option<String> {
    let caps = LETTER.captures(response)?;
    let l = caps.get(1)?.as_str();
    letters.contains(&l).then(|| l.to_string())
}

/// Prompt text for a record's option sheet.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionContext {
    pub question: String,
    pub evidence: String,
    pub schema_text: String,
    pub matched_block: String,
}

pub fn render_selection_prompt(
    client: &JudgeClient<'_>,
    ctx: &SelectionContext,
    sheet: &OptionSheet,
) -> Result<String, EnsembleError> {
    let question = join_evidence(&ctx.evidence, &ctx.question);
    let options = sheet.render();
    client
        .render(
            template::ENSEMBLE_SELECT,
            &[
                ("question", &question),
                ("table_info", &ctx.schema_text),
                ("matched_values", &ctx.matched_block),
                ("options", &options),
            ],
        )
        .map_err(|e| EnsembleError::Render(e.to_string()))
}

pub struct Ensembler<'a> {
    pub client: JudgeClient<'a>,
    pub judge: &'a ModelHandle,
    pub exec: ExecConfig,
}

impl Ensembler<'_> {
    /// Ask the judge for a letter, re-asking on unreadable answers, and fall
    /// back to the vote when none arrives.
    pub fn select(
        &self,
        record_id: &str,
        ctx: &SelectionContext,
        sheet: &OptionSheet,
        groups: &[ExecutionGroup],
    ) -> Result<SelectionOutcome, EnsembleError> {
        let first = sheet.options.first().ok_or(EnsembleError::EmptySheet)?;
        let outcome = |o: &OptionEntry, method, raw: String| SelectionOutcome {
            record_id: record_id.to_string(),
            chosen_letter: o.letter.clone(),
            chosen_sql: o.sql.clone(),
            method,
            judge_raw: raw,
            option_count: sheet.options.len(),
        };
        if sheet.options.len() == 1 {
            return Ok(outcome(first, SelectionMethod::Judge, String::new()));
        }
        let prompt = render_selection_prompt(&self.client, ctx, sheet)?;
        let letters = sheet.letters();
        let mut last = String::new();
        for attempt in 0..=self.client.max_reasks {
            let call = self.client.call(self.judge, template::ENSEMBLE_SELECT, prompt.clone(), attempt);
            match self.client.judge.complete(&call) {
                Ok(text) => {
                    if let Some(l) = parse_letter(&text, &letters) {
                        let o = sheet.get(&l).expect("letter from sheet");
                        return Ok(outcome(o, SelectionMethod::Judge, text));
                    }
                    last = text;
                }
                Err(e) => {
                    log::warn!("{record_id}: selection judge failed: {e}");
                    break;
                }
            }
        }
        let winner = majority_vote(groups)?;
        Ok(outcome(&sheet.options[winner], SelectionMethod::VoteFallback, last))
    }

    /// Execute, group, build options and select for one record.
    pub fn run(
        &self,
        record_id: &str,
        candidates: &mut [CandidateSql],
        ctx: &SelectionContext,
        db_file: &std::path::Path,
    ) -> Result<SelectionOutcome, EnsembleError> {
        if candidates.is_empty() {
            return Err(EnsembleError::NoCandidates(record_id.to_string()));
        }
        let groups = group_by_execution(candidates, db_file, &self.exec);
        let sheet = build_options(&groups, candidates);
        self.select(record_id, ctx, &sheet, &groups)
    }
}

/// One record's candidates and everything needed to present them.
#[derive(Debug, Clone)]
pub struct EnsembleItem {
    pub record_id: String,
    pub candidates: Vec<CandidateSql>,
    pub ctx: SelectionContext,
    pub db_file: PathBuf,
    /// Only needed for building selection training data.
    pub gold_sql: Option<String>,
}

pub fn run_all(ens: &Ensembler<'_>, items: &[EnsembleItem], mode: ExecMode) -> Vec<Result<SelectionOutcome, EnsembleError>> {
    par::map(mode, items, |item| {
        let mut cands = item.candidates.clone();
        ens.run(&item.record_id, &mut cands, &item.ctx, &item.db_file)
    })
}

/// Selection-model training example: the selection prompt and its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceExample {
    pub record_id: String,
    pub prompt: String,
    /// Empty when no option matches gold.
    pub answer: String,
    /// Set when no option matches gold; kept as a distractor-only example.
    #[serde(default)]
    pub skipped: bool,
}

impl Artifact for ChoiceExample {
    const KIND: &'static str = "choice_example";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChoiceReport {
    pub emitted: usize,
    pub no_match: Vec<String>,
    pub too_few_options: Vec<String>,
    pub gold_failed: Vec<String>,
}

/// One multiple-choice example per record whose candidates split into at
/// least two execution groups; the answer is the option matching gold.
pub fn build_choice_training_file(
    client: &JudgeClient<'_>,
    items: &[EnsembleItem],
    exec: &ExecConfig,
    mode: ExecMode,
) -> (Vec<ChoiceExample>, ChoiceReport) {
    enum Res {
        Example(ChoiceExample),
        TooFew,
        GoldFailed,
    }
    let results = par::map(mode, items, |item| {
        let Some(gold_sql) = item.gold_sql.as_deref() else {
            return Res::GoldFailed;
        };
        let gold = execute_with(&item.db_file, gold_sql, exec);
        if !gold.is_rows() {
            return Res::GoldFailed;
        }
        let mut cands = item.candidates.clone();
        let groups = group_by_execution(&mut cands, &item.db_file, exec);
        if groups.len() < 2 {
            return Res::TooFew;
        }
        let sheet = build_options(&groups, &cands);
        let Ok(prompt) = render_selection_prompt(client, &item.ctx, &sheet) else {
            return Res::GoldFailed;
        };
        let answer = sheet
            .options
            .iter()
            .find(|o| cands[o.candidate_index].outcome.as_ref().is_some_and(|out| ex_match(&gold, out)))
            .map(|o| o.letter.clone());
        Res::Example(ChoiceExample {
            record_id: item.record_id.clone(),
            prompt,
            skipped: answer.is_none(),
            answer: answer.unwrap_or_default(),
        })
    });
    let mut report = ChoiceReport::default();
    let mut out = Vec::new();
    for (item, r) in items.iter().zip(results) {
        match r {
            Res::Example(e) => {
                if e.skipped {
                    report.no_match.push(item.record_id.clone());
                }
                report.emitted += 1;
                out.push(e);
            }
            Res::TooFew => report.too_few_options.push(item.record_id.clone()),
            Res::GoldFailed => report.gold_failed.push(item.record_id.clone()),
        }
    }
    (out, report)
}
