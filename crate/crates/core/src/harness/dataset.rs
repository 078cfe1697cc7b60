use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("database for `{db_id}` not found at {path}")]
    MissingDatabase { db_id: String, path: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub question_id: String,
    pub db_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    pub gold_sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<BenchmarkItem>,
    pub db_root: PathBuf,
    /// Records dropped for missing or mistyped fields.
    pub skipped: usize,
}

impl Dataset {
    /// `<db_root>/<db_id>/<db_id>.sqlite`, the layout both benchmarks ship.
    pub fn db_path(&self, db_id: &str) -> PathBuf {
        db_path(&self.db_root, db_id)
    }
}

pub fn db_path(db_root: &Path, db_id: &str) -> PathBuf {
    db_root.join(db_id).join(format!("{db_id}.sqlite"))
}

/// Database directories tried, in order, when none is given.
pub const DB_ROOT_CANDIDATES: [&str; 4] = ["dev_databases", "train_databases", "database", "databases"];

pub fn default_db_root(dataset: &Path) -> PathBuf {
    let dir = dataset.parent().unwrap_or(Path::new("."));
    DB_ROOT_CANDIDATES
        .iter()
        .map(|d| dir.join(d))
        .find(|p| p.is_dir())
        .unwrap_or_else(|| dir.to_path_buf())
}

fn text(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> Option<String> {
    keys.iter().find_map(|k| obj.get(*k)).and_then(|v| match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    })
}

fn parse_item(index: usize, v: &Value) -> Option<BenchmarkItem> {
    let obj = v.as_object()?;
    Some(BenchmarkItem {
        question_id: text(obj, &["question_id", "id"]).unwrap_or_else(|| index.to_string()),
        db_id: text(obj, &["db_id"])?,
        question: text(obj, &["question"])?,
        evidence: text(obj, &["evidence"]).filter(|e| !e.trim().is_empty()),
        gold_sql: text(obj, &["SQL", "sql", "query"])?,
        difficulty: text(obj, &["difficulty"]),
    })
}

/// Reads a BIRD (`SQL`, `evidence`) or Spider (`query`) question file. Items
/// keep file order; records missing required fields are skipped and counted.
pub fn load_dataset(path: &Path, db_root: &Path) -> Result<Dataset, DatasetError> {
    let unreadable = |reason: String| DatasetError::Unreadable {
        path: path.display().to_string(),
        reason,
    };
    let raw = std::fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
    let values: Vec<Value> = if raw.trim().is_empty() {
        Vec::new()
    } else {
        serde_json::from_str(&raw).map_err(|e| unreadable(e.to_string()))?
    };
    let mut ds = Dataset {
        db_root: db_root.to_path_buf(),
        ..Dataset::default()
    };
    for (i, v) in values.iter().enumerate() {
        match parse_item(i, v) {
            Some(item) => ds.items.push(item),
            None => {
                warn!(index = i, "skipping malformed benchmark record");
                ds.skipped += 1;
            }
        }
    }
    for item in &ds.items {
        let p = ds.db_path(&item.db_id);
        if !p.is_file() {
            return Err(DatasetError::MissingDatabase {
                db_id: item.db_id.clone(),
                path: p.display().to_string(),
            });
        }
    }
    Ok(ds)
}
