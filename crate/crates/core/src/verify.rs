//! Data verification: query check, SQL check, query-SQL consistency, and the
//! mode-dependent filter that gates synthesized pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::Artifact;
use crate::catalog::{serialize_schema, Catalog, CatalogError};
use crate::dataset::{CheckFormat, ModelHandle};
use crate::exec::{execute_with, ExecConfig, ExecStatus};
use crate::judge::{template, JudgeClient, VerdictKind};
use crate::par::{self, ExecMode};
use crate::sql::syntax_check;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    QueryDiffusion,
    ExampleDiffusion,
    Repair,
    Synthesis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    QueryFluency,
    QuerySimilarity,
    SqlCheck,
    Consistency,
}

impl VerifyMode {
    /// Checks the mode requires, in execution order.
    pub fn required_checks(self) -> &'static [Check] {
        match self {
            VerifyMode::QueryDiffusion => &[Check::QueryFluency, Check::QuerySimilarity, Check::Consistency],
            VerifyMode::ExampleDiffusion | VerifyMode::Repair | VerifyMode::Synthesis => {
                &[Check::SqlCheck, Check::Consistency]
            }
        }
    }
}

impl std::str::FromStr for VerifyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "query_diffusion" | "query" => Ok(VerifyMode::QueryDiffusion),
            "example_diffusion" | "example" => Ok(VerifyMode::ExampleDiffusion),
            "repair" => Ok(VerifyMode::Repair),
            "synthesis" => Ok(VerifyMode::Synthesis),
            other => Err(format!("unknown verification mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub judge: String,
    pub yes: bool,
    #[serde(default)]
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictBundle {
    pub pair_id: String,
    pub mode: VerifyMode,
    pub query_fluent: Option<bool>,
    pub query_similar: Option<bool>,
    pub sql_legal: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sql_diagnostic: Option<String>,
    #[serde(default)]
    pub consistency_votes: Vec<Vote>,
    pub consistent: Option<bool>,
    pub overall: Overall,
    /// Checks executed, in order.
    #[serde(default)]
    pub checks_run: Vec<Check>,
}

impl Artifact for VerdictBundle {
    const KIND: &'static str = "verdict_bundle";
}

impl VerdictBundle {
    pub fn new(pair_id: impl Into<String>, mode: VerifyMode) -> Self {
        Self {
            pair_id: pair_id.into(),
            mode,
            query_fluent: None,
            query_similar: None,
            sql_legal: None,
            sql_diagnostic: None,
            consistency_votes: vec![],
            consistent: None,
            overall: Overall::Reject,
            checks_run: vec![],
        }
    }

    pub fn result(&self, check: Check) -> Option<bool> {
        match check {
            Check::QueryFluency => self.query_fluent,
            Check::QuerySimilarity => self.query_similar,
            Check::SqlCheck => self.sql_legal,
            Check::Consistency => self.consistent,
        }
    }

    /// Accept only when every check the mode requires ran and passed.
    pub fn finalize(&mut self) {
        let all_passed = self
            .mode
            .required_checks()
            .iter()
            .all(|c| self.checks_run.contains(c) && self.result(*c) == Some(true));
        self.overall = if all_passed { Overall::Accept } else { Overall::Reject };
    }

    pub fn accepted(&self) -> bool {
        self.overall == Overall::Accept
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid check policy: {0}")]
    Policy(String),
    #[error("pair `{pair_id}`: {message}")]
    Input { pair_id: String, message: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckPolicy {
    /// Consistency judges; must be an odd count.
    pub judges: Vec<ModelHandle>,
    /// Judge for fluency and similarity; defaults to the first consistency
    /// judge.
    #[serde(default)]
    pub query_judge: Option<ModelHandle>,
}

impl CheckPolicy {
    pub fn new(judges: Vec<ModelHandle>) -> Self {
        Self {
            judges,
            query_judge: None,
        }
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        if self.judges.is_empty() || self.judges.len() % 2 == 0 {
            return Err(VerifyError::Policy(format!(
                "consistency needs an odd number of judges, got {}",
                self.judges.len()
            )));
        }
        Ok(())
    }

    pub fn query_judge(&self) -> &ModelHandle {
        self.query_judge.as_ref().unwrap_or(&self.judges[0])
    }
}

/// A question-SQL pair awaiting verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPair {
    pub pair_id: String,
    pub db_id: String,
    pub query: String,
    pub sql: String,
    /// Source question for paraphrase similarity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_query: Option<String>,
    /// Schema text for the consistency prompt; the full schema when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_text: Option<String>,
}

impl Artifact for QueryPair {
    const KIND: &'static str = "query_pair";
}

fn input_err(pair_id: &str, message: impl Into<String>) -> VerifyError {
    VerifyError::Input {
        pair_id: pair_id.to_string(),
        message: message.into(),
    }
}

/// Fluency of `variant` and its similarity to `original`. Unreadable
/// verdicts count as no.
pub fn query_check(
    original: &str,
    variant: &str,
    client: &JudgeClient<'_>,
    judge: &ModelHandle,
) -> Result<(bool, bool), VerifyError> {
    if original.trim().is_empty() || variant.trim().is_empty() {
        return Err(input_err("-", "query check needs two non-empty texts"));
    }
    let fluent = client
        .ask_verdict(judge, template::FLUENCY_CHECK, &[("query", variant)], VerdictKind::YesNo)
        .positive_or_no();
    let similar = client
        .ask_verdict(
            judge,
            template::SIMILARITY_CHECK,
            &[("query1", original), ("query2", variant)],
            VerdictKind::YesNo,
        )
        .positive_or_no();
    Ok((fluent, similar))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlCheckResult {
    pub legal: bool,
    pub diagnostic: Option<String>,
}

/// Legal iff the SQL parses and executes to rows.
pub fn sql_check(sql: &str, db_file: &Path, cfg: &ExecConfig) -> SqlCheckResult {
    let parsed = syntax_check(sql);
    if !parsed.ok {
        return SqlCheckResult {
            legal: false,
            diagnostic: Some(format!("syntax: {}", parsed.error_message)),
        };
    }
    let out = execute_with(db_file, sql, cfg);
    match out.status {
        ExecStatus::Rows => SqlCheckResult {
            legal: true,
            diagnostic: None,
        },
        ExecStatus::DbError => SqlCheckResult {
            legal: false,
            diagnostic: out.error_message.map(|m| format!("execution: {m}")),
        },
        ExecStatus::Timeout => SqlCheckResult {
            legal: false,
            diagnostic: Some(format!("execution: timed out after {} ms", cfg.timeout_ms)),
        },
    }
}

fn consistency_vote(
    query: &str,
    schema_text: &str,
    sql: &str,
    client: &JudgeClient<'_>,
    judge: &ModelHandle,
) -> Vote {
    let attempt = match judge.check_format {
        CheckFormat::MultiLlm => client.ask_verdict(
            judge,
            template::MULTI_LLM_CHECK,
            &[("query", query), ("table_info", schema_text), ("SQL", sql)],
            VerdictKind::CompletedReason,
        ),
        CheckFormat::FineTuned => client.ask_verdict(
            judge,
            template::FINETUNE_CHECK,
            &[("query", query), ("table_info", schema_text), ("sql", sql)],
            VerdictKind::BinaryLabel,
        ),
    };
    let reason = match attempt.verdict.as_ref().map(|v| &v.value) {
        Some(crate::judge::VerdictValue::Completed { reason, .. }) => reason.clone(),
        _ => String::new(),
    };
    Vote {
        judge: judge.name.clone(),
        yes: attempt.positive_or_no(),
        reason,
        error: attempt.error,
    }
}

pub fn majority(votes: &[Vote]) -> bool {
    let yes = votes.iter().filter(|v| v.yes).count();
    yes > votes.len() - yes
}

/// Ask every judge; the strict majority of yes votes decides.
pub fn consistency_check(
    query: &str,
    schema_text: &str,
    sql: &str,
    client: &JudgeClient<'_>,
    policy: &CheckPolicy,
) -> Result<(bool, Vec<Vote>), VerifyError> {
    policy.validate()?;
    let votes: Vec<Vote> = policy
        .judges
        .iter()
        .map(|j| consistency_vote(query, schema_text, sql, client, j))
        .collect();
    Ok((majority(&votes), votes))
}

/// Shared inputs of a verification run.
pub struct Verifier<'a> {
    pub client: JudgeClient<'a>,
    pub policy: &'a CheckPolicy,
    pub catalog: &'a Catalog,
    pub exec: ExecConfig,
}

impl Verifier<'_> {
    /// Run the mode's checks in order, stopping at the first failure.
    pub fn verify_pair(&self, pair: &QueryPair, mode: VerifyMode) -> Result<VerdictBundle, VerifyError> {
        self.policy.validate()?;
        if pair.query.trim().is_empty() {
            return Err(input_err(&pair.pair_id, "empty query"));
        }
        let original = match (mode, pair.original_query.as_deref()) {
            (VerifyMode::QueryDiffusion, None) => {
                return Err(input_err(&pair.pair_id, "query diffusion needs the original query"))
            }
            (_, o) => o,
        };
        let mut bundle = VerdictBundle::new(&pair.pair_id, mode);
        for &check in mode.required_checks() {
            bundle.checks_run.push(check);
            let passed = match check {
                Check::QueryFluency => {
                    let judge = self.policy.query_judge();
                    let ok = self
                        .client
                        .ask_verdict(judge, template::FLUENCY_CHECK, &[("query", &pair.query)], VerdictKind::YesNo)
                        .positive_or_no();
                    bundle.query_fluent = Some(ok);
                    ok
                }
                Check::QuerySimilarity => {
                    let judge = self.policy.query_judge();
                    let ok = self
                        .client
                        .ask_verdict(
                            judge,
                            template::SIMILARITY_CHECK,
                            &[("query1", original.unwrap_or_default()), ("query2", &pair.query)],
                            VerdictKind::YesNo,
                        )
                        .positive_or_no();
                    bundle.query_similar = Some(ok);
                    ok
                }
                Check::SqlCheck => {
                    let db = self.catalog.db_path(&pair.db_id)?;
                    let res = sql_check(&pair.sql, &db, &self.exec);
                    bundle.sql_legal = Some(res.legal);
                    bundle.sql_diagnostic = res.diagnostic;
                    res.legal
                }
                Check::Consistency => {
                    let schema = match &pair.schema_text {
                        Some(s) => s.clone(),
                        None => {
                            let graph = self.catalog.graph(&pair.db_id)?;
                            serialize_schema(&graph, None, None).expect("full schema always renders")
                        }
                    };
                    let (ok, votes) = consistency_check(&pair.query, &schema, &pair.sql, &self.client, self.policy)?;
                    bundle.consistency_votes = votes;
                    bundle.consistent = Some(ok);
                    ok
                }
            };
            if !passed {
                break;
            }
        }
        bundle.finalize();
        Ok(bundle)
    }

    pub fn verify_pairs(
        &self,
        pairs: &[QueryPair],
        mode: VerifyMode,
        exec_mode: ExecMode,
    ) -> Vec<Result<VerdictBundle, VerifyError>> {
        par::map(exec_mode, pairs, |p| self.verify_pair(p, mode))
    }
}
