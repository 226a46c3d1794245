//! Fixture databases for unit tests.

use std::fs;
use std::path::{Path, PathBuf};

#[allow(dead_code)]
pub const FIXTURE_DBS: [&str; 4] = ["school", "concert", "movie_platform", "california_schools"];

pub fn script(name: &str) -> &'static str {
    match name {
        "school" => include_str!("../tests/fixtures/db/school.sql"),
        "concert" => include_str!("../tests/fixtures/db/concert.sql"),
        "movie_platform" => include_str!("../tests/fixtures/db/movie_platform.sql"),
        "california_schools" => include_str!("../tests/fixtures/db/california_schools.sql"),
        other => panic!("no fixture database `{other}`"),
    }
}

/// Create `<dir>/<name>.sqlite` from the fixture script.
pub fn build_db(dir: &Path, name: &str) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join(format!("{name}.sqlite"));
    let conn = rusqlite::Connection::open(&path).unwrap();
    conn.execute_batch(script(name)).unwrap();
    path
}

/// Bird-style root with every fixture database at `<root>/<db>/<db>.sqlite`.
#[allow(dead_code)]
pub fn build_root(root: &Path) -> PathBuf {
    for name in FIXTURE_DBS {
        build_db(&root.join(name), name);
    }
    root.to_path_buf()
}
