use std::path::{Path, PathBuf};

use rusqlite::Connection;
use tempfile::TempDir;

use crate::catalog::{apply_filter, introspect, load_descriptions, FilterLevel, SchemaCatalog};
use crate::linking::LinkingPrediction;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn build_db(dir: &Path, name: &str, script: &str) -> PathBuf {
    let path = dir.join(format!("{name}.sqlite"));
    Connection::open(&path).unwrap().execute_batch(script).unwrap();
    path
}

pub fn toy_db() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let script = std::fs::read_to_string(fixtures_dir().join("toy.sql")).unwrap();
    let path = build_db(dir.path(), "toy", &script);
    (dir, path)
}

pub fn toy_catalog() -> SchemaCatalog {
    let (_dir, path) = toy_db();
    introspect(&path, 3).unwrap()
}

/// The financial fixture filtered down to the columns shown in the format
/// figures.
pub fn financial_catalog() -> SchemaCatalog {
    let dir = tempfile::tempdir().unwrap();
    let script = std::fs::read_to_string(fixtures_dir().join("financial/financial.sql")).unwrap();
    let path = build_db(dir.path(), "financial", &script);
    let mut cat = introspect(&path, 3).unwrap();
    cat.apply_descriptions(&load_descriptions(&fixtures_dir().join("financial/database_description")).unwrap());
    let p = LinkingPrediction::from_pairs([
        ("account".to_string(), vec!["account_id".to_string(), "district_id".to_string()]),
        ("district".to_string(), vec!["district_id".to_string(), "A11".to_string()]),
        ("loan".to_string(), vec!["amount".to_string(), "status".to_string()]),
    ]);
    apply_filter(&cat, &p, FilterLevel::FullFiltering)
}

pub fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}
