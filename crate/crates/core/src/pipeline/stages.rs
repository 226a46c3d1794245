use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use serde_json::json;

use super::config::ConfigError;
use super::manifest::{Products, Stage, StageError};
use super::Runtime;
use crate::artifact::read_artifact;
use crate::augment::{
    build_active_learning_set, collect_errors, sft_hash, AugmentBatch, AugmentedPair, Augmenter, ErrorRecord, ErrorSet,
    Strategy,
};
use crate::catalog::{render_matched_block, serialize_schema};
use crate::correct::{CorrectionContext, Corrector};
use crate::dataset::{
    dataset_to_json, join_predictions, load_any, load_dataset, DatasetSplit, ModelHandle, Prediction, PredictionFile,
    QuestionRecord, SourceFormat,
};
use crate::ensemble::{build_choice_training_file, run_all, EnsembleItem, Ensembler, SelectionContext, SelectionMethod};
use crate::exec::{execution_accuracy, CandidateSql, EvalItem, ExecConfig};
use crate::linking::{HttpScorer, LexicalScorer, LinkResult, Linker, RelevanceScorer};
use crate::par;
use crate::repair::repair_dataset;
use crate::verify::{CheckPolicy, QueryPair, Verifier, VerifyMode};

fn pick<'a>(rt: &'a Runtime, flag: Option<&str>, fallback: Option<&str>) -> Result<Option<&'a ModelHandle>, ConfigError> {
    flag.or(fallback).map(|n| rt.model(n)).transpose()
}

fn require<'a>(rt: &'a Runtime, flag: Option<&str>, fallback: Option<&str>, what: &str) -> Result<&'a ModelHandle, ConfigError> {
    pick(rt, flag, fallback)?.ok_or_else(|| ConfigError::Invalid(format!("{what} needs a judge (flag or config)")))
}

fn policy(rt: &Runtime, judges: &[String]) -> Result<CheckPolicy, ConfigError> {
    let names = if judges.is_empty() { &rt.config.verify.judges } else { judges };
    let handles = names.iter().map(|n| rt.model(n).cloned()).collect::<Result<Vec<_>, _>>()?;
    let mut p = CheckPolicy::new(handles);
    p.query_judge = pick(rt, None, rt.config.verify.query_judge.as_deref())?.cloned();
    p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(p)
}

fn verifier<'a>(rt: &'a Runtime, policy: &'a CheckPolicy) -> Verifier<'a> {
    Verifier {
        client: rt.client(),
        policy,
        catalog: &rt.catalog,
        exec: rt.config.exec,
    }
}

fn load_links(path: Option<&Path>) -> Result<BTreeMap<String, LinkResult>, StageError> {
    let Some(path) = path else {
        return Ok(BTreeMap::new());
    };
    Ok(read_artifact::<LinkResult>(path)?
        .into_iter()
        .map(|l| (l.record_id.clone(), l))
        .collect())
}

/// Linked schema text and matched-value block for a record; the full
/// schema and no matches when the record was not linked.
fn record_context(
    rt: &Runtime,
    links: &BTreeMap<String, LinkResult>,
    record: &QuestionRecord,
) -> Result<(String, String), StageError> {
    let graph = rt.catalog.graph(&record.db_id)?;
    Ok(match links.get(&record.record_id) {
        Some(l) if l.db_id == record.db_id => (l.schema_text(&graph), render_matched_block(&l.matched_values)),
        _ => (
            serialize_schema(&graph, None, None).expect("full schema always renders"),
            String::new(),
        ),
    })
}

fn read_candidates(paths: &[PathBuf]) -> Result<BTreeMap<String, Vec<CandidateSql>>, StageError> {
    let mut by_record: BTreeMap<String, Vec<CandidateSql>> = BTreeMap::new();
    for p in paths {
        for c in read_artifact::<CandidateSql>(p)? {
            by_record.entry(c.record_id.clone()).or_default().push(c);
        }
    }
    Ok(by_record)
}

fn opt_input(out: &mut Vec<(&'static str, PathBuf)>, role: &'static str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        out.push((role, p.clone()));
    }
}

/// Load a source dataset into `question_record` JSON Lines and check that
/// every database resolves.
#[derive(Debug, Clone, Serialize)]
pub struct IngestStage {
    pub dataset: PathBuf,
    pub format: SourceFormat,
    pub out: PathBuf,
}

impl Stage for IngestStage {
    const NAME: &'static str = "ingest";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("dataset", self.dataset.clone())]
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("records", self.out.clone())]
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let split = load_dataset(&self.dataset, self.format)?;
        let dbs: BTreeSet<&str> = split.records.iter().map(|r| r.db_id.as_str()).collect();
        let unknown: Vec<&str> = dbs.iter().copied().filter(|d| rt.catalog.db_path(d).is_err()).collect();
        if !unknown.is_empty() {
            return Err(StageError::Input(format!(
                "databases not found under {}: {}",
                rt.catalog.root().display(),
                unknown.join(", ")
            )));
        }
        let mut p = Products::new(json!({"records": split.records.len(), "databases": dbs}));
        p.jsonl(&self.out, &split.records)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkStage {
    pub dataset: PathBuf,
    pub format: SourceFormat,
    pub out: PathBuf,
    /// Remote scorer URL; lexical scoring when unset.
    pub scorer: Option<String>,
    pub judge: Option<String>,
    pub top_n_tables: Option<usize>,
    pub top_n_columns: Option<usize>,
}

impl Stage for LinkStage {
    const NAME: &'static str = "link";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("dataset", self.dataset.clone())]
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("link_results", self.out.clone())]
    }

    fn check(&self, rt: &Runtime) -> Result<(), ConfigError> {
        pick(rt, self.judge.as_deref(), rt.config.link.judge.as_deref())?;
        self.link_config(rt).validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let split = load_any(&self.dataset, self.format)?;
        let cfg = self.link_config(rt);
        let judge = pick(rt, self.judge.as_deref(), rt.config.link.judge.as_deref()).map_err(|e| StageError::Input(e.to_string()))?;
        let lexical = LexicalScorer { params: cfg.bm25() };
        let remote = self.scorer.as_ref().or(rt.config.link.scorer_url.as_ref()).map(|url| HttpScorer {
            url: url.clone(),
            timeout: Duration::from_millis(rt.config.link.scorer_timeout_ms),
        });
        let scorer: &dyn RelevanceScorer = match &remote {
            Some(s) => s,
            None => &lexical,
        };
        let linker = Linker {
            scorer,
            client: judge.map(|h| (rt.client(), h)),
            cfg: &cfg,
        };
        let results = par::try_map(rt.exec_mode, &split.records, |r| -> Result<LinkResult, StageError> {
            let graph = rt.catalog.graph(&r.db_id)?;
            let index = rt.catalog.index(&r.db_id)?;
            Ok(linker.link(r, &graph, &index)?)
        })?;
        let warned = results.iter().filter(|r| !r.warnings.is_empty()).count();
        let mut p = Products::new(json!({
            "records": results.len(),
            "with_warnings": warned,
            "scorer": scorer.name(),
            "judge": judge.map(|j| j.name.clone()),
        }));
        p.jsonl(&self.out, &results)?;
        Ok(p)
    }
}

impl LinkStage {
    fn link_config(&self, rt: &Runtime) -> crate::linking::LinkConfig {
        let mut cfg = rt.config.link.params.clone();
        if let Some(n) = self.top_n_tables {
            cfg.top_n_tables = n;
        }
        if let Some(n) = self.top_n_columns {
            cfg.top_n_columns_per_table = n;
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyStage {
    pub pairs: PathBuf,
    pub mode: VerifyMode,
    pub judges: Vec<String>,
    pub out: PathBuf,
}

impl Stage for VerifyStage {
    const NAME: &'static str = "verify";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("pairs", self.pairs.clone())]
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("verdicts", self.out.clone())]
    }

    fn check(&self, rt: &Runtime) -> Result<(), ConfigError> {
        policy(rt, &self.judges).map(|_| ())
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let pairs: Vec<QueryPair> = read_artifact(&self.pairs)?;
        let policy = policy(rt, &self.judges).map_err(|e| StageError::Input(e.to_string()))?;
        let v = verifier(rt, &policy);
        let bundles = v
            .verify_pairs(&pairs, self.mode, rt.exec_mode)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let accepted = bundles.iter().filter(|b| b.accepted()).count();
        let mut p = Products::new(json!({
            "pairs": bundles.len(),
            "accepted": accepted,
            "rejected": bundles.len() - accepted,
        }));
        p.jsonl(&self.out, &bundles)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RepairStage {
    pub dataset: PathBuf,
    pub format: SourceFormat,
    pub pred: PathBuf,
    pub judges: Vec<String>,
    /// Repaired dataset; `.jsonl` writes question records, anything else
    /// the source JSON shape.
    pub out: PathBuf,
    pub report_out: PathBuf,
    pub decisions_out: PathBuf,
    pub drop_flagged: bool,
}

impl Stage for RepairStage {
    const NAME: &'static str = "repair";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("dataset", self.dataset.clone()), ("predictions", self.pred.clone())]
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![
            ("dataset", self.out.clone()),
            ("report", self.report_out.clone()),
            ("decisions", self.decisions_out.clone()),
        ]
    }

    fn check(&self, rt: &Runtime) -> Result<(), ConfigError> {
        policy(rt, &self.judges).map(|_| ())
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let split = load_any(&self.dataset, self.format)?;
        let preds = PredictionFile::read(&self.pred)?;
        let policy = policy(rt, &self.judges).map_err(|e| StageError::Input(e.to_string()))?;
        let v = verifier(rt, &policy);
        let mut out = repair_dataset(&split, &preds, &v, rt.exec_mode, self.drop_flagged)?;
        out.report.decisions_path = Some(self.decisions_out.display().to_string());
        let mut p = Products::new(serde_json::to_value(&out.report).expect("report serializes"));
        if self.out.extension().is_some_and(|e| e == "jsonl") {
            p.jsonl(&self.out, &out.split.records)?;
        } else {
            p.json(&self.out, &dataset_to_json(&out.split))?;
        }
        p.json(&self.report_out, &out.report)?;
        p.jsonl(&self.decisions_out, &out.decisions)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentStage {
    /// Precomputed error set; otherwise derived from `dataset` + `pred`.
    pub errors: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub format: SourceFormat,
    pub strategy: Strategy,
    pub generators: Vec<String>,
    pub judges: Vec<String>,
    pub k: Option<usize>,
    pub iteration: u32,
    /// Every generated pair with its verdict.
    pub out: PathBuf,
    /// Where to write the derived error set.
    pub errors_out: Option<PathBuf>,
}

impl AugmentStage {
    fn generator_names<'a>(&'a self, rt: &'a Runtime) -> &'a [String] {
        if self.generators.is_empty() {
            &rt.config.augment.generators
        } else {
            &self.generators
        }
    }
}

impl Stage for AugmentStage {
    const NAME: &'static str = "augment";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v = Vec::new();
        opt_input(&mut v, "errors", &self.errors);
        opt_input(&mut v, "dataset", &self.dataset);
        opt_input(&mut v, "predictions", &self.pred);
        v
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v = vec![("pairs", self.out.clone())];
        opt_input(&mut v, "errors", &self.errors_out);
        v
    }

    fn check(&self, rt: &Runtime) -> Result<(), ConfigError> {
        match (&self.errors, &self.dataset, &self.pred) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            _ => return Err(ConfigError::Invalid("augment takes either --errors or --dataset with --pred".into())),
        }
        if self.errors.is_some() && self.errors_out.is_some() {
            return Err(ConfigError::Invalid("--errors-out only applies when errors are derived".into()));
        }
        let cap = rt.config.augment.params.iteration_cap;
        if self.iteration == 0 || self.iteration > cap {
            return Err(ConfigError::Invalid(format!("iteration {} outside 1..={cap}", self.iteration)));
        }
        if self.k == Some(0) {
            return Err(ConfigError::Invalid("--k must be at least 1".into()));
        }
        let names = self.generator_names(rt);
        if names.is_empty() {
            return Err(ConfigError::Invalid("augment needs at least one generator".into()));
        }
        for n in names {
            rt.model(n)?;
        }
        policy(rt, &self.judges).map(|_| ())
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let errors = match &self.errors {
            Some(path) => {
                let records: Vec<ErrorRecord> = read_artifact(path)?;
                ErrorSet {
                    iteration: self.iteration,
                    records,
                    excluded: Vec::new(),
                }
            }
            None => {
                let split = load_any(self.dataset.as_ref().expect("checked"), self.format)?;
                let preds = PredictionFile::read(self.pred.as_ref().expect("checked"))?;
                collect_errors(&split, &preds, &rt.catalog, &rt.config.exec, rt.exec_mode, self.iteration)?
            }
        };
        let policy = policy(rt, &self.judges).map_err(|e| StageError::Input(e.to_string()))?;
        let v = verifier(rt, &policy);
        let mut cfg = rt.config.augment.params;
        if let Some(k) = self.k {
            cfg.k = k;
        }
        let mut all = AugmentBatch::default();
        for name in self.generator_names(rt) {
            let generator = rt.model(name).map_err(|e| StageError::Input(e.to_string()))?;
            let aug = Augmenter {
                verifier: &v,
                generator,
            };
            let b = aug.run(&errors, self.strategy, &cfg, rt.exec_mode)?;
            all.pairs.extend(b.pairs);
            all.warnings.extend(b.warnings);
        }
        for w in &all.warnings {
            log::warn!("{w}");
        }
        let mut per_kind: BTreeMap<&str, usize> = BTreeMap::new();
        for pair in all.accepted() {
            *per_kind.entry(pair.augment_kind.as_str()).or_default() += 1;
        }
        let mut p = Products::new(json!({
            "iteration": self.iteration,
            "error_records": errors.records.len(),
            "invalid_gold": errors.excluded.len(),
            "pairs": all.pairs.len(),
            "accepted": all.accepted().count(),
            "accepted_per_kind": per_kind,
            "warnings": all.warnings,
        }));
        p.jsonl(&self.out, &all.pairs)?;
        if let Some(path) = &self.errors_out {
            p.jsonl(path, &errors.records)?;
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildSftStage {
    pub original: PathBuf,
    pub format: SourceFormat,
    pub augmented: Vec<PathBuf>,
    pub link_results: Option<PathBuf>,
    pub iteration: u32,
    pub out: PathBuf,
    pub stats_out: PathBuf,
}

impl Stage for BuildSftStage {
    const NAME: &'static str = "build-sft";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v = vec![("original", self.original.clone())];
        v.extend(self.augmented.iter().map(|p| ("augmented", p.clone())));
        opt_input(&mut v, "link_results", &self.link_results);
        v
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("sft", self.out.clone()), ("stats", self.stats_out.clone())]
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let original = load_any(&self.original, self.format)?;
        let mut pairs: Vec<AugmentedPair> = Vec::new();
        for path in &self.augmented {
            pairs.extend(read_artifact::<AugmentedPair>(path)?);
        }
        let total = pairs.len();
        pairs.retain(|p| p.accepted());
        let rejected = total - pairs.len();
        if rejected > 0 {
            log::info!("{rejected} rejected pair(s) left out of the training set");
        }
        let links = load_links(self.link_results.as_deref())?;
        let file = build_active_learning_set(&original, &pairs, &links, &rt.catalog, self.iteration)?;
        log::info!("training set composition:\n{}", file.stats.render_table());
        let hash = sft_hash(&file);
        let mut stats = serde_json::to_value(&file.stats).expect("stats serialize");
        stats["rejected_skipped"] = json!(rejected);
        stats["sft_sha256"] = json!(hash);
        let mut p = Products::new(stats.clone());
        p.jsonl(&self.out, &file.examples)?;
        p.json(&self.stats_out, &stats)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrectStage {
    pub candidates: PathBuf,
    pub dataset: PathBuf,
    pub format: SourceFormat,
    pub link_results: Option<PathBuf>,
    pub judge: Option<String>,
    pub max_syntax_rounds: Option<usize>,
    /// Correction traces.
    pub out: PathBuf,
    /// Corrected SQL as candidates for the ensemble stage.
    pub candidates_out: Option<PathBuf>,
}

impl Stage for CorrectStage {
    const NAME: &'static str = "correct";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v = vec![("candidates", self.candidates.clone()), ("dataset", self.dataset.clone())];
        opt_input(&mut v, "link_results", &self.link_results);
        v
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v = vec![("traces", self.out.clone())];
        opt_input(&mut v, "candidates", &self.candidates_out);
        v
    }

    fn check(&self, rt: &Runtime) -> Result<(), ConfigError> {
        require(rt, self.judge.as_deref(), rt.config.correct.judge.as_deref(), "correct").map(|_| ())
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let judge = require(rt, self.judge.as_deref(), rt.config.correct.judge.as_deref(), "correct")
            .map_err(|e| StageError::Input(e.to_string()))?;
        let split = load_any(&self.dataset, self.format)?;
        let records = split.by_id();
        let links = load_links(self.link_results.as_deref())?;
        let candidates: Vec<CandidateSql> = read_artifact(&self.candidates)?;
        let mut items = Vec::with_capacity(candidates.len());
        for c in candidates {
            let r = records
                .get(c.record_id.as_str())
                .ok_or_else(|| StageError::Input(format!("candidate for unknown record `{}`", c.record_id)))?;
            let (schema_text, _) = record_context(rt, &links, r)?;
            let ctx = CorrectionContext {
                question: r.question.clone(),
                evidence: r.evidence.clone(),
                schema_text,
                db_file: rt.catalog.db_path(&r.db_id)?,
            };
            items.push((c, ctx));
        }
        let corrector = Corrector {
            client: rt.client(),
            judge,
            exec: rt.config.exec,
            max_syntax_rounds: self.max_syntax_rounds.unwrap_or(rt.config.correct.max_syntax_rounds),
        };
        let traces = corrector.correct_all(&items, rt.exec_mode);
        let changed = traces.iter().filter(|t| t.changed).count();
        let mut p = Products::new(json!({"candidates": traces.len(), "changed": changed}));
        p.jsonl(&self.out, &traces)?;
        if let Some(path) = &self.candidates_out {
            let corrected: Vec<CandidateSql> = items
                .iter()
                .zip(&traces)
                .map(|((c, _), t)| CandidateSql {
                    record_id: c.record_id.clone(),
                    sql: t.final_sql.clone(),
                    model: c.model.clone(),
                    stage: "corrected".into(),
                    outcome: None,
                })
                .collect();
            p.jsonl(path, &corrected)?;
        }
        Ok(p)
    }
}

/// Per-record ensemble items in dataset order; records without
/// candidates are returned separately.
fn ensemble_items(
    rt: &Runtime,
    split: &DatasetSplit,
    candidate_files: &[PathBuf],
    links: Option<&Path>,
    with_gold: bool,
) -> Result<(Vec<EnsembleItem>, Vec<String>), StageError> {
    let mut cands = read_candidates(candidate_files)?;
    let ids: BTreeSet<&str> = split.records.iter().map(|r| r.record_id.as_str()).collect();
    if let Some(stray) = cands.keys().find(|k| !ids.contains(k.as_str())) {
        return Err(StageError::Input(format!("candidate for unknown record `{stray}`")));
    }
    let links = load_links(links)?;
    let mut items = Vec::new();
    let mut missing = Vec::new();
    for r in &split.records {
        let Some(c) = cands.remove(&r.record_id) else {
            missing.push(r.record_id.clone());
            continue;
        };
        let (schema_text, matched_block) = record_context(rt, &links, r)?;
        items.push(EnsembleItem {
            record_id: r.record_id.clone(),
            candidates: c,
            ctx: SelectionContext {
                question: r.question.clone(),
                evidence: r.evidence.clone(),
                schema_text,
                matched_block,
            },
            db_file: rt.catalog.db_path(&r.db_id)?,
            gold_sql: with_gold.then(|| r.gold_sql.clone()),
        });
    }
    Ok((items, missing))
}

/// Only majority vote is available as the fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    #[default]
    Vote,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleStage {
    pub candidates: Vec<PathBuf>,
    pub dataset: PathBuf,
    pub format: SourceFormat,
    pub link_results: Option<PathBuf>,
    pub judge: Option<String>,
    pub fallback: Fallback,
    pub out: PathBuf,
    /// Chosen SQL per record, ready for `eval`.
    pub predictions_out: PathBuf,
}

impl Stage for EnsembleStage {
    const NAME: &'static str = "ensemble";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v: Vec<(&'static str, PathBuf)> = self.candidates.iter().map(|p| ("candidates", p.clone())).collect();
        v.push(("dataset", self.dataset.clone()));
        opt_input(&mut v, "link_results", &self.link_results);
        v
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("outcomes", self.out.clone()), ("predictions", self.predictions_out.clone())]
    }

    fn check(&self, rt: &Runtime) -> Result<(), ConfigError> {
        if self.candidates.is_empty() {
            return Err(ConfigError::Invalid("ensemble needs at least one --candidates file".into()));
        }
        require(rt, self.judge.as_deref(), rt.config.ensemble.judge.as_deref(), "ensemble").map(|_| ())
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let judge = require(rt, self.judge.as_deref(), rt.config.ensemble.judge.as_deref(), "ensemble")
            .map_err(|e| StageError::Input(e.to_string()))?;
        let split = load_any(&self.dataset, self.format)?;
        let (items, missing) = ensemble_items(rt, &split, &self.candidates, self.link_results.as_deref(), false)?;
        for id in &missing {
            log::warn!("{id}: no candidates, skipped");
        }
        let ens = Ensembler {
            client: rt.client(),
            judge,
            exec: rt.config.exec,
        };
        let outcomes = run_all(&ens, &items, rt.exec_mode)
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let by_judge = outcomes.iter().filter(|o| o.method == SelectionMethod::Judge).count();
        let predictions: Vec<Prediction> = outcomes
            .iter()
            .map(|o| Prediction {
                record_id: o.record_id.clone(),
                sql: o.chosen_sql.clone(),
                model: "ensemble".into(),
            })
            .collect();
        let mut p = Products::new(json!({
            "records": outcomes.len(),
            "judge": by_judge,
            "vote_fallback": outcomes.len() - by_judge,
            "missing_candidates": missing,
        }));
        p.jsonl(&self.out, &outcomes)?;
        p.jsonl(&self.predictions_out, &predictions)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildChoiceSftStage {
    pub candidates: Vec<PathBuf>,
    /// Dataset carrying the gold SQL.
    pub gold: PathBuf,
    pub format: SourceFormat,
    pub link_results: Option<PathBuf>,
    pub out: PathBuf,
    pub report_out: PathBuf,
}

impl Stage for BuildChoiceSftStage {
    const NAME: &'static str = "build-choice-sft";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut v: Vec<(&'static str, PathBuf)> = self.candidates.iter().map(|p| ("candidates", p.clone())).collect();
        v.push(("gold", self.gold.clone()));
        opt_input(&mut v, "link_results", &self.link_results);
        v
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("choice_sft", self.out.clone()), ("report", self.report_out.clone())]
    }

    fn check(&self, _rt: &Runtime) -> Result<(), ConfigError> {
        if self.candidates.is_empty() {
            return Err(ConfigError::Invalid("build-choice-sft needs at least one --candidates file".into()));
        }
        Ok(())
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let split = load_any(&self.gold, self.format)?;
        let (items, missing) = ensemble_items(rt, &split, &self.candidates, self.link_results.as_deref(), true)?;
        let (examples, report) = build_choice_training_file(&rt.client(), &items, &rt.config.exec, rt.exec_mode);
        let mut summary = serde_json::to_value(&report).expect("report serializes");
        summary["missing_candidates"] = json!(missing);
        let mut p = Products::new(summary.clone());
        p.jsonl(&self.out, &examples)?;
        p.json(&self.report_out, &summary)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalStage {
    pub gold: PathBuf,
    pub format: SourceFormat,
    pub pred: PathBuf,
    pub timeout_ms: Option<u64>,
    pub out: PathBuf,
}

impl Stage for EvalStage {
    const NAME: &'static str = "eval";

    fn inputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("gold", self.gold.clone()), ("predictions", self.pred.clone())]
    }

    fn outputs(&self) -> Vec<(&'static str, PathBuf)> {
        vec![("report", self.out.clone())]
    }

    fn run(&self, rt: &Runtime) -> Result<Products, StageError> {
        let split = load_any(&self.gold, self.format)?;
        let preds = PredictionFile::read(&self.pred)?;
        let joined = join_predictions(&split, &preds)?;
        let items: Vec<EvalItem> = joined
            .pairs
            .iter()
            .map(|(r, sql)| EvalItem {
                record_id: r.record_id.clone(),
                db_id: r.db_id.clone(),
                difficulty: r.difficulty,
                gold_sql: r.gold_sql.clone(),
                pred_sql: sql.clone(),
            })
            .collect();
        let exec = match self.timeout_ms {
            Some(t) => ExecConfig {
                timeout_ms: t,
                ..rt.config.exec
            },
            None => rt.config.exec,
        };
        let report = execution_accuracy(&items, &rt.catalog, &exec, rt.exec_mode);
        let mut p = Products::new(json!({
            "ex": report.ex(),
            "breakdown": report.breakdown,
            "invalid_gold": report.invalid_gold.len(),
        }));
        p.json(&self.out, &report)?;
        Ok(p)
    }
}
