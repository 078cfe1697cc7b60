//! Shared fixtures for the integration tests: the toy benchmark and a
//! scripted backend that stands in for every model.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nrep_core::catalog::{apply_filter, introspect, load_descriptions, FilterLevel, SchemaCatalog};
use nrep_core::generation::GENERATOR_SYSTEM_PROMPT;
use nrep_core::harness::{build_fewshot_store, load_dataset, Dataset, PipelineConfig, ResolvedConfig};
use nrep_core::linking::{LinkingPrediction, DEFAULT_SYSTEM_PROMPT};
use nrep_core::llm::{ChatBackend, ChatRequest, ChatResponse, FnBackend, HashEmbedder, LlmError, Role, Usage};
use nrep_core::selection::JUDGE_SYSTEM_PROMPT;
use rusqlite::Connection;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixtures_dir() -> PathBuf {
    manifest_dir().join("tests/fixtures")
}

pub fn bench_dir() -> PathBuf {
    fixtures_dir().join("toy_bench")
}

pub fn golden(name: &str) -> String {
    std::fs::read_to_string(manifest_dir().join("tests/golden").join(name)).unwrap()
}

pub fn build_db(path: &Path, script: &str) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    Connection::open(path).unwrap().execute_batch(script).unwrap();
}

/// Creates `<root>/toy/toy.sqlite` from the toy script.
pub fn toy_db_root(root: &Path) -> PathBuf {
    let script = std::fs::read_to_string(fixtures_dir().join("toy.sql")).unwrap();
    build_db(&root.join("toy/toy.sqlite"), &script);
    root.to_path_buf()
}

pub fn toy_catalog() -> SchemaCatalog {
    let dir = tempfile::tempdir().unwrap();
    let root = toy_db_root(dir.path());
    introspect(&root.join("toy/toy.sqlite"), 3).unwrap()
}

/// The financial fixture filtered to the columns used in the format goldens.
pub fn financial_catalog() -> SchemaCatalog {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("financial.sqlite");
    let script = std::fs::read_to_string(fixtures_dir().join("financial/financial.sql")).unwrap();
    build_db(&path, &script);
    let mut cat = introspect(&path, 3).unwrap();
    cat.apply_descriptions(&load_descriptions(&fixtures_dir().join("financial/database_description")).unwrap());
    let p = LinkingPrediction::from_pairs([
        ("account".to_string(), vec!["account_id".to_string(), "district_id".to_string()]),
        ("district".to_string(), vec!["district_id".to_string(), "A11".to_string()]),
        ("loan".to_string(), vec!["amount".to_string(), "status".to_string()]),
    ]);
    apply_filter(&cat, &p, FilterLevel::FullFiltering)
}

/// Toy benchmark materialised in a temp dir: databases, dataset and the
/// committed config (whose few-shot store path points at the fixture).
pub struct ToyBench {
    pub dir: TempDir,
    pub dataset: Dataset,
    pub config: ResolvedConfig,
}

impl ToyBench {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = toy_db_root(&dir.path().join("databases"));
        let dataset = load_dataset(&bench_dir().join("dev.json"), &root).unwrap();
        let config = PipelineConfig::load(&bench_dir().join("config.toml")).unwrap().resolve().unwrap();
        Self { dir, dataset, config }
    }

    pub fn train(&self) -> Dataset {
        load_dataset(&bench_dir().join("train.json"), &self.dataset.db_root).unwrap()
    }

    /// Few-shot store rebuilt from the training split, as JSONL.
    pub fn fresh_store_jsonl(&self) -> String {
        let build = build_fewshot_store(&self.train(), &HashEmbedder::default(), self.config.raw.sample_values).unwrap();
        assert_eq!(build.skipped, 0);
        let path = self.dir.path().join("store.jsonl");
        build.store.write_jsonl(&path).unwrap();
        std::fs::read_to_string(path).unwrap()
    }
}

#[derive(Debug, Deserialize)]
struct ScriptEntry {
    link: BTreeMap<String, Vec<String>>,
    variants: Vec<String>,
    #[serde(default)]
    broken_linker: Option<String>,
    #[serde(default)]
    judge_reply: Option<String>,
}

fn question_of(text: &str) -> Option<&str> {
    text.lines().find_map(|l| l.strip_prefix("Question: "))
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let i = text.find(start)? + start.len();
    let j = text[i..].find(end)? + i;
    Some(&text[i..j])
}

fn stable_hash(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    u64::from_be_bytes(h.finalize()[..8].try_into().unwrap())
}

fn scripted_reply(script: &BTreeMap<String, ScriptEntry>, req: &ChatRequest) -> Result<String, LlmError> {
    let system = req.messages.first().map(|m| m.content.as_str()).unwrap_or("");
    let last = req
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let q = question_of(last).ok_or_else(|| LlmError::Scripted("no question in prompt".into()))?;
    let entry = script.get(q).ok_or_else(|| LlmError::Scripted(format!("unscripted question {q:?}")))?;
    if system == DEFAULT_SYSTEM_PROMPT.trim_end() {
        if entry.broken_linker.as_deref() == Some(req.model.as_str()) {
            return Ok("I could not work out which tables are relevant here.".into());
        }
        return Ok(format!("```json\n{}\n```", serde_json::to_string_pretty(&entry.link).unwrap()));
    }
    if system == GENERATOR_SYSTEM_PROMPT.trim_end() || system == GENERATOR_SYSTEM_PROMPT {
        let pick = stable_hash(&[&req.model, last]) as usize % entry.variants.len();
        return Ok(format!("```sql\n{}\n```", entry.variants[pick]));
    }
    if system == JUDGE_SYSTEM_PROMPT.trim_end() || system == JUDGE_SYSTEM_PROMPT {
        if let Some(r) = &entry.judge_reply {
            return Ok(r.clone());
        }
        let a = between(last, "Candidate A:\n```sql\n", "\n```").unwrap_or("");
        let b = between(last, "Candidate B:\n```sql\n", "\n```").unwrap_or("");
        // prefers the earlier scripted variant, then the shorter query
        let rank = |sql: &str| (entry.variants.iter().position(|v| v == sql).unwrap_or(usize::MAX), sql.len());
        return Ok(if rank(a) <= rank(b) { "A" } else { "B" }.into());
    }
    Err(LlmError::Scripted("unrecognised system prompt".into()))
}

/// Deterministic stand-in for the linker, generator and judge models,
/// driven by `toy_bench/script.json`. Token counts are a quarter of the
/// character counts.
pub fn scripted_backend() -> Arc<dyn ChatBackend> {
    let text = std::fs::read_to_string(bench_dir().join("script.json")).unwrap();
    let script: BTreeMap<String, ScriptEntry> = serde_json::from_str(&text).unwrap();
    Arc::new(FnBackend(move |req: &ChatRequest| {
        let text = scripted_reply(&script, req)?;
        let input: usize = req.messages.iter().map(|m| m.content.len()).sum();
        Ok(ChatResponse {
            usage: Usage {
                input_tokens: (input / 4) as u64,
                output_tokens: (text.len() / 4 + 1) as u64,
            },
            text,
        })
    }))
}
