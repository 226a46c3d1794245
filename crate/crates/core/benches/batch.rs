//! Sequential vs parallel execution of record-level batches over the
//! fixture databases.

use std::fs;
use std::path::{Path, PathBuf};

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use t2sql_core::catalog::Catalog;
use t2sql_core::dataset::{load_dataset, SourceFormat};
use t2sql_core::exec::{execution_accuracy, group_by_execution, CandidateSql, EvalItem, ExecConfig};
use t2sql_core::{par, ExecMode};

const DBS: [&str; 4] = ["school", "concert", "movie_platform", "california_schools"];
const COPIES: usize = 20;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn build_root(root: &Path) {
    for name in DBS {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        let script = fs::read_to_string(fixtures().join("db").join(format!("{name}.sql"))).unwrap();
        let conn = rusqlite::Connection::open(dir.join(format!("{name}.sqlite"))).unwrap();
        conn.execute_batch(&script).unwrap();
    }
}

fn batch(c: &mut Criterion) {
    let tmp = tempfile::tempdir().unwrap();
    build_root(tmp.path());
    let catalog = Catalog::new(tmp.path());
    let split = load_dataset(&fixtures().join("corpus/train.json"), SourceFormat::Bird).unwrap();
    let items: Vec<EvalItem> = (0..COPIES)
        .flat_map(|_| split.records.iter())
        .map(|r| EvalItem {
            record_id: r.record_id.clone(),
            db_id: r.db_id.clone(),
            difficulty: r.difficulty,
            gold_sql: r.gold_sql.clone(),
            pred_sql: r.gold_sql.clone(),
        })
        .collect();
    // Five candidates per record: the gold, two rewrites and two failures.
    let sets: Vec<(PathBuf, Vec<CandidateSql>)> = items
        .iter()
        .map(|it| {
            let sqls = [
                it.gold_sql.clone(),
                it.gold_sql.to_lowercase(),
                format!("SELECT * FROM ({}) LIMIT 1", it.gold_sql),
                "SELECT * FROM nope".to_string(),
                "SELECT 1".to_string(),
            ];
            let db = catalog.db_path(&it.db_id).unwrap();
            (db, sqls.iter().map(|s| CandidateSql::new(&it.record_id, s)).collect())
        })
        .collect();
    let cfg = ExecConfig::default();

    let mut g = c.benchmark_group("batch");
    g.sample_size(20);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let name = format!("{mode:?}").to_lowercase();
        g.bench_with_input(BenchmarkId::new("execution_accuracy", &name), &mode, |b, &mode| {
            b.iter(|| execution_accuracy(&items, &catalog, &cfg, mode))
        });
        g.bench_with_input(BenchmarkId::new("group_by_execution", &name), &mode, |b, &mode| {
            b.iter(|| {
                par::map(mode, &sets, |(db, cands)| {
                    let mut cands = cands.clone();
                    group_by_execution(&mut cands, db, &cfg).len()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
