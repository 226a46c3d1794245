//! Two-step semantic correction followed by error-driven syntax correction.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::Artifact;
use crate::dataset::{join_evidence, ModelHandle};
use crate::exec::{execute_with, CandidateSql, ExecConfig, ExecStatus};
use crate::judge::{template, AskError, JudgeClient};
use crate::par::{self, ExecMode};
use crate::sql::{extract_sql_from_response, is_parseable, normalize_sql};

pub const NO_CHANGE_SENTINEL: &str = "The SQL query is correct, and no modifications are needed.";
pub const DEFAULT_SYNTAX_ROUNDS: usize = 2;

#[derive(Debug, Error)]
pub enum CorrectError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Ask(#[from] AskError),
}

/// True when the last non-empty line of a suggestion says nothing needs
/// changing.
pub fn is_no_change(response: &str) -> bool {
    let needle = NO_CHANGE_SENTINEL.trim_end_matches('.').to_lowercase();
    response
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.to_lowercase().contains(&needle))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntaxAttempt {
    pub error: String,
    pub fixed_sql: String,
    /// False when the fix did not parse and was discarded.
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SemanticSuggest,
    SemanticFix,
    SyntaxFix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTrace {
    pub record_id: String,
    pub input_sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestions: Option<String>,
    pub semantic_sql: String,
    pub syntax_attempts: Vec<SyntaxAttempt>,
    pub final_sql: String,
    pub changed: bool,
    /// Stages entered, in order.
    pub stages: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Artifact for CorrectionTrace {
    const KIND: &'static str = "correction_trace";
}

/// What the correction prompts need to know about a record.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionContext {
    pub question: String,
    pub evidence: String,
    pub schema_text: String,
    pub db_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntaxResult {
    pub sql: String,
    pub attempts: Vec<SyntaxAttempt>,
    pub executed: bool,
    pub notes: Vec<String>,
}

pub struct Corrector<'a> {
    pub client: JudgeClient<'a>,
    pub judge: &'a ModelHandle,
    pub exec: ExecConfig,
    pub max_syntax_rounds: usize,
}

impl Corrector<'_> {
    pub fn semantic_suggest(&self, question: &str, evidence: &str, sql: &str, schema_text: &str) -> Result<String, CorrectError> {
        if question.trim().is_empty() || sql.trim().is_empty() {
            return Err(CorrectError::Input("semantic suggestions need a question and SQL".into()));
        }
        let q = join_evidence(evidence, question);
        Ok(self.client.ask(
            self.judge,
            template::SEMANTIC_SUGGEST,
            &[("question", &q), ("SQL", sql), ("table_info", schema_text)],
        )?)
    }

    /// The fixed SQL, or `None` when the response does not parse.
    pub fn semantic_fix(
        &self,
        question: &str,
        sql: &str,
        suggestions: &str,
        schema_text: &str,
    ) -> Result<Option<String>, CorrectError> {
        if suggestions.trim().is_empty() || is_no_change(suggestions) {
            return Err(CorrectError::Input("semantic fix needs actual suggestions".into()));
        }
        let response = self.client.ask(
            self.judge,
            template::SEMANTIC_FIX,
            &[("suggestion", suggestions), ("question", question), ("SQL", sql), ("table_info", schema_text)],
        )?;
        let fixed = extract_sql_from_response(&response);
        Ok(is_parseable(&fixed).then_some(fixed))
    }

    /// Execute, and on a database error ask for a fix, up to
    /// `max_syntax_rounds` times. Returns the first candidate that runs, or
    /// the input when none does.
    pub fn syntax_fix(&self, question: &str, sql: &str, ctx: &CorrectionContext) -> SyntaxResult {
        let mut result = SyntaxResult {
            sql: sql.to_string(),
            attempts: vec![],
            executed: false,
            notes: vec![],
        };
        let mut candidate = sql.to_string();
        for round in 0..=self.max_syntax_rounds {
            let out = execute_with(&ctx.db_file, &candidate, &self.exec);
            let error = match out.status {
                ExecStatus::Rows => {
                    result.sql = candidate;
                    result.executed = true;
                    return result;
                }
                ExecStatus::Timeout => {
                    result.notes.push("syntax: candidate timed out, not retried".into());
                    return result;
                }
                ExecStatus::DbError => out.error_message.unwrap_or_default(),
            };
            if round == self.max_syntax_rounds {
                break;
            }
            let response = match self.client.ask(
                self.judge,
                template::SYNTAX_FIX,
                &[
                    ("error", &error),
                    ("question", question),
                    ("sql", &candidate),
                    ("table_info", &ctx.schema_text),
                ],
            ) {
                Ok(r) => r,
                Err(e) => {
                    result.notes.push(format!("syntax: {e}"));
                    return result;
                }
            };
            let fixed = extract_sql_from_response(&response);
            let accepted = is_parseable(&fixed);
            result.attempts.push(SyntaxAttempt {
                error,
                fixed_sql: fixed.clone(),
                accepted,
            });
            if accepted {
                candidate = fixed;
            }
        }
        result.notes.push(format!(
            "syntax: no candidate executed after {} round(s)",
            result.attempts.len()
        ));
        result
    }

    /// Semantic suggestion, conditional semantic fix, then syntax fix. Judge
    /// failures skip a stage rather than abort the record.
    pub fn correct(&self, candidate: &CandidateSql, ctx: &CorrectionContext) -> CorrectionTrace {
        let input = candidate.sql.clone();
        let question = join_evidence(&ctx.evidence, &ctx.question);
        let mut trace = CorrectionTrace {
            record_id: candidate.record_id.clone(),
            input_sql: input.clone(),
            suggestions: None,
            semantic_sql: input.clone(),
            syntax_attempts: vec![],
            final_sql: input.clone(),
            changed: false,
            stages: vec![Stage::SemanticSuggest],
            notes: vec![],
        };
        match self.semantic_suggest(&ctx.question, &ctx.evidence, &input, &ctx.schema_text) {
            Ok(s) => {
                if !is_no_change(&s) && !s.trim().is_empty() {
                    trace.stages.push(Stage::SemanticFix);
                    match self.semantic_fix(&question, &input, &s, &ctx.schema_text) {
                        Ok(Some(fixed)) => trace.semantic_sql = fixed,
                        Ok(None) => trace.notes.push("semantic fix did not parse; kept the input".into()),
                        Err(e) => trace.notes.push(format!("semantic fix skipped: {e}")),
                    }
                }
                trace.suggestions = Some(s);
            }
            Err(e) => trace.notes.push(format!("semantic stage skipped: {e}")),
        }
        trace.stages.push(Stage::SyntaxFix);
        let syntax = self.syntax_fix(&question, &trace.semantic_sql, ctx);
        trace.syntax_attempts = syntax.attempts;
        trace.notes.extend(syntax.notes);
        trace.final_sql = syntax.sql;
        if !syntax.executed && trace.semantic_sql != input && execute_with(&ctx.db_file, &input, &self.exec).is_rows() {
            trace.notes.push("corrected SQL never executed; reverted to the input".into());
            trace.final_sql = input.clone();
        }
        trace.changed = normalize_sql(&trace.final_sql) != normalize_sql(&input);
        trace
    }

    pub fn correct_all(&self, items: &[(CandidateSql, CorrectionContext)], mode: ExecMode) -> Vec<CorrectionTrace> {
        par::map(mode, items, |(c, ctx)| self.correct(c, ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ModelKind;
    use crate::judge::{CountingJudge, FnJudge, GatewayError, JudgeCall, TemplateRegistry};
    use crate::test_support;

    type Script = fn(&JudgeCall) -> Result<String, GatewayError>;

    fn run<R>(script: Script, f: impl FnOnce(&Corrector<'_>, &CountingJudge<FnJudge<Script>>, CorrectionContext) -> R) -> R {
        let dir = tempfile::tempdir().unwrap();
        let db = test_support::build_db(dir.path(), "school");
        let reg = TemplateRegistry::builtin();
        let judge = CountingJudge::new(FnJudge(script));
        let h = ModelHandle::new("fixer", ModelKind::Judge);
        let c = Corrector {
            client: JudgeClient::new(&judge, &reg),
            judge: &h,
            exec: ExecConfig::default(),
            max_syntax_rounds: DEFAULT_SYNTAX_ROUNDS,
        };
        let ctx = CorrectionContext {
            question: "How many schools are in Fresno?".into(),
            evidence: String::new(),
            schema_text: "CREATE TABLE schools (...)".into(),
            db_file: db,
        };
        f(&c, &judge, ctx)
    }

    fn noop(c: &JudgeCall) -> Result<String, GatewayError> {
        match c.template_id.as_str() {
            template::SEMANTIC_SUGGEST => Ok(format!("1. fine\n7. {NO_CHANGE_SENTINEL}")),
            _ => Ok("```sql\nSELECT count(*) FROM schools WHERE city = 'Fresno'\n```".into()),
        }
    }

    #[test]
    fn sentinel_ends_semantic_stage() {
        run(noop, |c, judge, ctx| {
            let t = c.correct(&CandidateSql::new("r", "SELECT count(*) FROM schools"), &ctx);
            assert_eq!(t.stages, [Stage::SemanticSuggest, Stage::SyntaxFix]);
            assert!(!t.changed);
            assert_eq!(judge.count(template::SEMANTIC_FIX), 0);
            assert_eq!(judge.count(template::SYNTAX_FIX), 0);
        });
    }

    fn fix_and_typo(c: &JudgeCall) -> Result<String, GatewayError> {
        Ok(match c.template_id.as_str() {
            template::SEMANTIC_SUGGEST => "4. The WHERE clause lacks the city filter.".into(),
            template::SEMANTIC_FIX => "SELECT count(*) FROM school WHERE city = 'Fresno'".into(),
            template::SYNTAX_FIX => {
                assert!(c.prompt.contains("no such table: school"), "{}", c.prompt);
                "SELECT count(*) FROM schools WHERE city = 'Fresno'".into()
            }
            _ => unreachable!(),
        })
    }

    #[test]
    fn syntax_stage_repairs_semantic_typo() {
        run(fix_and_typo, |c, judge, ctx| {
            let t = c.correct(&CandidateSql::new("r", "SELECT count(*) FROM schools"), &ctx);
            assert_eq!(t.stages, [Stage::SemanticSuggest, Stage::SemanticFix, Stage::SyntaxFix]);
            assert_eq!(t.semantic_sql, "SELECT count(*) FROM school WHERE city = 'Fresno'");
            assert_eq!(t.final_sql, "SELECT count(*) FROM schools WHERE city = 'Fresno'");
            assert!(t.changed);
            assert_eq!(t.syntax_attempts.len(), 1);
            assert_eq!(judge.count(template::SYNTAX_FIX), 1);
        });
    }

    fn garbage(c: &JudgeCall) -> Result<String, GatewayError> {
        Ok(match c.template_id.as_str() {
            template::SEMANTIC_SUGGEST => "Use the other column.".into(),
            _ => "SELEKT what FROM".into(),
        })
    }

    #[test]
    fn unparseable_fixes_are_discarded() {
        run(garbage, |c, judge, ctx| {
            let t = c.correct(&CandidateSql::new("r", "SELECT count(*) FROM nope"), &ctx);
            assert_eq!(t.final_sql, "SELECT count(*) FROM nope");
            assert!(!t.changed);
            assert_eq!(t.syntax_attempts.len(), 2);
            assert!(t.syntax_attempts.iter().all(|a| !a.accepted));
            assert_eq!(judge.count(template::SYNTAX_FIX), 2);
        });
    }

    fn down(_: &JudgeCall) -> Result<String, GatewayError> {
        Err(GatewayError::Other("offline".into()))
    }

    #[test]
    fn gateway_failures_degrade() {
        run(down, |c, _, ctx| {
            let t = c.correct(&CandidateSql::new("r", "SELECT * FROM nope"), &ctx);
            assert_eq!(t.final_sql, "SELECT * FROM nope");
            assert_eq!(t.stages, [Stage::SemanticSuggest, Stage::SyntaxFix]);
            assert!(t.notes.len() >= 2);
        });
    }

    #[test]
    fn executing_sql_needs_no_syntax_calls() {
        run(down, |c, judge, ctx| {
            let r = c.syntax_fix("q", "SELECT 1", &ctx);
            assert!(r.executed);
            assert_eq!(judge.total(), 0);
            assert!(matches!(c.semantic_fix("q", "SELECT 1", NO_CHANGE_SENTINEL, ""), Err(CorrectError::Input(_))));
        });
    }

    fn echo(c: &JudgeCall) -> Result<String, GatewayError> {
        let marker = "### Buggy SQLite QUERY:\n";
        Ok(match c.prompt.find(marker) {
            Some(i) => c.prompt[i + marker.len()..].lines().next().unwrap().to_string(),
            None => "Consider the filter.".into(),
        })
    }

    #[test]
    fn echo_judge_is_identity() {
        run(echo, |c, _, ctx| {
            for sql in ["SELECT city FROM schools", "SELECT * FROM missing_table", "SELECT count(*) FROM schools WHERE county = 'Fresno'"] {
                let t = c.correct(&CandidateSql::new("r", sql), &ctx);
                assert_eq!(t.final_sql, sql);
                assert!(!t.changed);
            }
        });
    }

    #[test]
    fn sentinel_detection() {
        assert!(is_no_change(NO_CHANGE_SENTINEL));
        assert!(is_no_change("Steps...\n‘The SQL query is correct, and no modifications are needed.’\n"));
        assert!(!is_no_change("The SQL query is correct, and no modifications are needed.\nBut step 4 found a bug."));
    }
}
