use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use t2sql_core::augment::Strategy;
use t2sql_core::dataset::SourceFormat;
use t2sql_core::par::ExecMode;
use t2sql_core::pipeline::{
    build_report, run_stage, AugmentStage, BuildChoiceSftStage, BuildSftStage, ConfigError, CorrectStage,
    EnsembleStage, EvalStage, IngestStage, LinkStage, PipelineConfig, PipelineError, RepairStage, Runtime, Stage,
    StageOutcome, VerifyStage,
};
use t2sql_core::verify::VerifyMode;

#[derive(Parser)]
#[command(name = "t2sql", version, about = "Data-centric text-to-SQL pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `db_root` from the config.
    #[arg(long, global = true)]
    db_root: Option<PathBuf>,
    /// Directory for default outputs and the run manifest.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Manifest path (default: <run-dir>/manifest.json).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Skip the stage when its manifest entry matches current hashes.
    #[arg(long, global = true)]
    resume: bool,
    /// Record live responses into the transcript store.
    #[arg(long, global = true)]
    record: bool,
}

#[derive(Args)]
struct Data {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "bird")]
    format: SourceFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Load a Bird/Spider JSON file into question records.
    Ingest {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Schema linking: value match, first and second filter.
    Link {
        #[command(flatten)]
        data: Data,
        /// Remote relevance scorer URL (lexical scoring otherwise).
        #[arg(long)]
        scorer: Option<String>,
        #[arg(long)]
        judge: Option<String>,
        #[arg(long)]
        top_n_tables: Option<usize>,
        #[arg(long)]
        top_n_columns: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify question/SQL pairs.
    Verify {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        mode: VerifyMode,
        #[arg(long, value_delimiter = ',')]
        judges: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace gold SQL with predictions the verifier prefers.
    Repair {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_delimiter = ',')]
        judges: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        decisions: Option<PathBuf>,
        #[arg(long)]
        drop_flagged: bool,
    },
    /// Generate and verify new pairs around mispredicted records.
    Augment {
        #[arg(long, conflicts_with_all = ["dataset", "pred"])]
        errors: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        pred: Option<PathBuf>,
        #[arg(long, default_value = "bird")]
        format: SourceFormat,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long = "generator")]
        generators: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        judges: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 1)]
        iteration: u32,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the derived error set.
        #[arg(long)]
        errors_out: Option<PathBuf>,
    },
    /// Originals plus accepted augmentations as SFT JSON Lines.
    BuildSft {
        #[arg(long)]
        original: PathBuf,
        #[arg(long, default_value = "bird")]
        format: SourceFormat,
        #[arg(long, num_args = 1..)]
        augmented: Vec<PathBuf>,
        #[arg(long)]
        link_results: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        iteration: u32,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Semantic then syntax correction of candidate SQL.
    Correct {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        link_results: Option<PathBuf>,
        #[arg(long)]
        judge: Option<String>,
        #[arg(long)]
        max_syntax_rounds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        candidates_out: Option<PathBuf>,
    },
    /// Group candidates by execution and pick one per record.
    Ensemble {
        #[command(flatten)]
        data: Data,
        #[arg(long, num_args = 1.., required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        link_results: Option<PathBuf>,
        #[arg(long)]
        judge: Option<String>,
        /// Used when the judge gives no readable letter.
        #[arg(long, default_value = "vote", value_parser = ["vote"])]
        fallback: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        predictions_out: Option<PathBuf>,
    },
    /// Multiple-choice training data for a selection model.
    BuildChoiceSft {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "bird")]
        format: SourceFormat,
        #[arg(long, num_args = 1.., required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long)]
        link_results: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Execution accuracy with a per-difficulty breakdown.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "bird")]
        format: SourceFormat,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        timeout_ms: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize the run manifest.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exec_mode(jobs: Option<usize>) -> Result<ExecMode> {
    match jobs {
        Some(0) => Err(ConfigError::Invalid("--jobs must be at least 1".into()).into()),
        Some(1) => Ok(ExecMode::Sequential),
        Some(n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("cannot size the worker pool")?;
            #[cfg(not(feature = "parallel"))]
            log::warn!("built without the parallel feature; --jobs {n} runs sequentially");
            Ok(ExecMode::Parallel)
        }
        None => Ok(ExecMode::Parallel),
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = match (&g.config, &g.db_root) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.clone(),
                source,
            })?;
            PipelineConfig::parse(&text, path)?
        }
        (None, Some(root)) => PipelineConfig::with_db_root(root),
        (None, None) => return Err(ConfigError::Invalid("pass --config or --db-root".into())),
    };
    if let Some(root) = &g.db_root {
        cfg.db_root = root.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx {
    rt: Runtime,
    manifest: PathBuf,
    run_dir: PathBuf,
    resume: bool,
}

impl Ctx {
    fn default_out(&self, given: Option<PathBuf>, name: &str) -> PathBuf {
        given.unwrap_or_else(|| self.run_dir.join(name))
    }

    fn run<S: Stage>(&self, stage: &S) -> Result<StageOutcome> {
        let outcome = run_stage(&self.rt, &self.manifest, stage, self.resume)?;
        match &outcome {
            StageOutcome::Ran(r) => {
                for o in &r.outputs {
                    log::info!("{}: wrote {}", S::NAME, o.path.display());
                }
            }
            StageOutcome::Skipped(_) => log::info!("{}: skipped (up to date)", S::NAME),
        }
        Ok(outcome)
    }
}

fn report(g: &Global, out: Option<PathBuf>) -> Result<()> {
    let manifest = g.manifest.clone().unwrap_or_else(|| g.run_dir.join("manifest.json"));
    let rep = build_report(&manifest).map_err(|e| PipelineError::Stage {
        stage: "report".into(),
        source: e.into(),
    })?;
    print!("{}", rep.render());
    if let Some(path) = out {
        t2sql_core::artifact::write_json(&rep, &path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Command::Report { out } = cli.command {
        return report(&g, out);
    }
    let mode = exec_mode(g.jobs)?;
    let cfg = load_config(&g)?;
    let ctx = Ctx {
        rt: Runtime::new(cfg, mode, g.record)?,
        manifest: g.manifest.clone().unwrap_or_else(|| g.run_dir.join("manifest.json")),
        run_dir: g.run_dir.clone(),
        resume: g.resume,
    };
    match cli.command {
        Command::Ingest { data, out } => {
            ctx.run(&IngestStage {
                dataset: data.dataset,
                format: data.format,
                out: ctx.default_out(out, "records.jsonl"),
            })?;
        }
        Command::Link {
            data,
            scorer,
            judge,
            top_n_tables,
            top_n_columns,
            out,
        } => {
            ctx.run(&LinkStage {
                dataset: data.dataset,
                format: data.format,
                out: ctx.default_out(out, "link_results.jsonl"),
                scorer,
                judge,
                top_n_tables,
                top_n_columns,
            })?;
        }
        Command::Verify { pairs, mode, judges, out } => {
            ctx.run(&VerifyStage {
                pairs,
                mode,
                judges,
                out: ctx.default_out(out, "verdicts.jsonl"),
            })?;
        }
        Command::Repair {
            data,
            pred,
            judges,
            out,
            report,
            decisions,
            drop_flagged,
        } => {
            let ext = if data.dataset.extension().is_some_and(|e| e == "jsonl") { "jsonl" } else { "json" };
            let out = ctx.default_out(out, &format!("repaired.{ext}"));
            ctx.run(&RepairStage {
                report_out: report.unwrap_or_else(|| with_ext(&out, "report.json")),
                decisions_out: decisions.unwrap_or_else(|| with_ext(&out, "decisions.jsonl")),
                dataset: data.dataset,
                format: data.format,
                pred,
                judges,
                out,
                drop_flagged,
            })?;
        }
        Command::Augment {
            errors,
            dataset,
            pred,
            format,
            strategy,
            generators,
            judges,
            k,
            iteration,
            out,
            errors_out,
        } => {
            ctx.run(&AugmentStage {
                errors,
                dataset,
                pred,
                format,
                strategy,
                generators,
                judges,
                k,
                iteration,
                out: ctx.default_out(out, &format!("augmented_iter{iteration}.jsonl")),
                errors_out,
            })?;
        }
        Command::BuildSft {
            original,
            format,
            augmented,
            link_results,
            iteration,
            out,
            stats,
        } => {
            let out = ctx.default_out(out, &format!("sft_iter{iteration}.jsonl"));
            ctx.run(&BuildSftStage {
                stats_out: stats.unwrap_or_else(|| with_ext(&out, "stats.json")),
                original,
                format,
                augmented,
                link_results,
                iteration,
                out,
            })?;
        }
        Command::Correct {
            data,
            candidates,
            link_results,
            judge,
            max_syntax_rounds,
            out,
            candidates_out,
        } => {
            ctx.run(&CorrectStage {
                candidates,
                dataset: data.dataset,
                format: data.format,
                link_results,
                judge,
                max_syntax_rounds,
                out: ctx.default_out(out, "correction_traces.jsonl"),
                candidates_out: Some(ctx.default_out(candidates_out, "corrected_candidates.jsonl")),
            })?;
        }
        Command::Ensemble {
            data,
            candidates,
            link_results,
            judge,
            fallback: _,
            out,
            predictions_out,
        } => {
            ctx.run(&EnsembleStage {
                candidates,
                dataset: data.dataset,
                format: data.format,
                link_results,
                judge,
                fallback: Default::default(),
                out: ctx.default_out(out, "selections.jsonl"),
                predictions_out: ctx.default_out(predictions_out, "ensemble_predictions.jsonl"),
            })?;
        }
        Command::BuildChoiceSft {
            gold,
            format,
            candidates,
            link_results,
            out,
            report,
        } => {
            let out = ctx.default_out(out, "choice_sft.jsonl");
            ctx.run(&BuildChoiceSftStage {
                candidates,
                gold,
                format,
                link_results,
                report_out: report.unwrap_or_else(|| with_ext(&out, "report.json")),
                out,
            })?;
        }
        Command::Eval {
            gold,
            format,
            pred,
            timeout_ms,
            out,
        } => {
            let out = ctx.default_out(out, "eval_report.json");
            ctx.run(&EvalStage {
                gold,
                format,
                pred,
                timeout_ms,
                out: out.clone(),
            })?;
            let text = std::fs::read_to_string(&out).with_context(|| format!("reading {}", out.display()))?;
            let rep: t2sql_core::exec::EvalReport = serde_json::from_str(&text)?;
            print!("{}", rep.render_table());
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<PipelineError>() {
        Some(PipelineError::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
