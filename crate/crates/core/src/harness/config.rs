use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::FilterLevel;
use crate::generation::CandidateSpec;
use crate::linking::{LinkerRunId, LinkingFewShots, DEFAULT_SYSTEM_PROMPT};
use crate::llm::{PriceTable, DEFAULT_IN_FLIGHT};
use crate::representation::RepresentationFormat;
use crate::selection::{ConfidencePolicy, JUDGE_SYSTEM_PROMPT, JUDGE_USER_TEMPLATE};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn default_generator() -> String {
    "gemini-1.5-flash".into()
}

fn default_embedding() -> String {
    "text-embedding-3-small".into()
}

fn default_k() -> usize {
    3
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_precision() -> u32 {
    6
}

fn default_in_flight() -> usize {
    DEFAULT_IN_FLIGHT
}

fn default_workers() -> usize {
    4
}

fn default_sample_k() -> usize {
    crate::catalog::DEFAULT_SAMPLE_K
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateConfig {
    pub format: RepresentationFormat,
    pub filter: FilterLevel,
    /// Linker model; required unless `filter = "none"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linker_model: Option<String>,
    /// Overrides the pipeline-wide generator model for this candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_model: Option<String>,
}

/// Pipeline configuration, read from TOML. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub candidates: Vec<CandidateConfig>,
    #[serde(default = "default_generator")]
    pub generator_model: String,
    #[serde(default = "default_generator")]
    pub judge_model: String,
    /// Embedding model used with a live backend.
    #[serde(default = "default_embedding")]
    pub embedding_model: String,
    #[serde(default = "default_k")]
    pub fewshot_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot_store: Option<PathBuf>,
    #[serde(default = "default_sample_k")]
    pub sample_values: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_precision")]
    pub precision: u32,
    /// Global cap on concurrent LLM calls.
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    /// Benchmark items processed concurrently.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linker_system_prompt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linker_fewshots: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_system_prompt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_user_template: Option<PathBuf>,
    /// Escalating vote distributions per candidate count, e.g.
    /// `[confidence] 3 = [[1, 1, 1]]`. Five candidates have a built-in rule.
    #[serde(default)]
    pub confidence: BTreeMap<String, Vec<Vec<usize>>>,
}

impl Default for PipelineConfig {
    /// The five-candidate configuration from the final system.
    fn default() -> Self {
        let c = |format, filter, linker: Option<&str>| CandidateConfig {
            format,
            filter,
            linker_model: linker.map(str::to_string),
            generator_model: None,
        };
        use FilterLevel::*;
        use RepresentationFormat::*;
        Self {
            candidates: vec![
                c(MacSchema, NoFiltering, None),
                c(MacSchema, FullFiltering, Some("gpt-4o")),
                c(MSchema, TableOnly, Some("gpt-4o")),
                c(MSchema, FullFiltering, Some("gpt-4o")),
                c(Ddl, FullFiltering, Some("gemini-1.5-pro")),
            ],
            generator_model: default_generator(),
            judge_model: default_generator(),
            embedding_model: default_embedding(),
            fewshot_k: default_k(),
            fewshot_store: None,
            sample_values: default_sample_k(),
            timeout_ms: default_timeout_ms(),
            precision: default_precision(),
            in_flight: default_in_flight(),
            workers: default_workers(),
            price_table: None,
            linker_system_prompt: None,
            linker_fewshots: None,
            judge_system_prompt: None,
            judge_user_template: None,
            confidence: BTreeMap::new(),
        }
    }
}

/// A distinct (format, model) linker call shared by every candidate that
/// filters with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkerPlan {
    pub id: LinkerRunId,
    pub format: RepresentationFormat,
    pub model: String,
}

/// Validated configuration with assets loaded.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub raw: PipelineConfig,
    pub specs: Vec<CandidateSpec>,
    pub linkers: Vec<LinkerPlan>,
    pub policy: ConfidencePolicy,
    pub prices: PriceTable,
    pub linker_system_prompt: String,
    pub linker_fewshots: LinkingFewShots,
    pub judge_system_prompt: String,
    pub judge_user_template: String,
    pub fewshot_store: Option<PathBuf>,
}

impl ResolvedConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.raw.timeout_ms)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::from_toml_str(&read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.fewshot_store,
            &mut cfg.price_table,
            &mut cfg.linker_system_prompt,
            &mut cfg.linker_fewshots,
            &mut cfg.judge_system_prompt,
            &mut cfg.judge_user_template,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks the candidate list, assigns linker runs and loads every asset.
    pub fn resolve(self) -> Result<ResolvedConfig, ConfigError> {
        if self.candidates.is_empty() {
            return Err(ConfigError::Invalid("at least one candidate is required".into()));
        }
        let mut linkers: Vec<LinkerPlan> = Vec::new();
        let mut specs = Vec::with_capacity(self.candidates.len());
        for (i, c) in self.candidates.iter().enumerate() {
            let linker_run = match (c.filter, &c.linker_model) {
                (FilterLevel::NoFiltering, None) => None,
                (FilterLevel::NoFiltering, Some(_)) => {
                    return Err(ConfigError::Invalid(format!("candidate {i}: filter = \"none\" takes no linker_model")))
                }
                (_, None) => {
                    return Err(ConfigError::Invalid(format!("candidate {i}: filter = \"{}\" needs a linker_model", c.filter)))
                }
                (_, Some(model)) => {
                    let existing = linkers.iter().find(|l| l.format == c.format && &l.model == model);
                    Some(match existing {
                        Some(l) => l.id,
                        None => {
                            let id = LinkerRunId(linkers.len());
                            linkers.push(LinkerPlan {
                                id,
                                format: c.format,
                                model: model.clone(),
                            });
                            id
                        }
                    })
                }
            };
            specs.push(CandidateSpec {
                spec_index: i,
                format: c.format,
                filter_level: c.filter,
                linker_run,
                generator_model: c.generator_model.clone().unwrap_or_else(|| self.generator_model.clone()),
            });
        }

        let mut policy = ConfidencePolicy::default();
        for (n, rules) in &self.confidence {
            let n: usize = n
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("confidence key `{n}` is not a candidate count")))?;
            policy = policy
                .with_rule(n, rules.clone())
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        policy
            .check(specs.len())
            .map_err(|e| ConfigError::Invalid(format!("{e}; add a [confidence] entry")))?;

        let prices = match &self.price_table {
            Some(p) => PriceTable::load(p).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => PriceTable::default(),
        };
        let linker_fewshots = match &self.linker_fewshots {
            Some(p) => LinkingFewShots::from_json(&read(p)?).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => LinkingFewShots::default(),
        };
        let text_or = |p: &Option<PathBuf>, default: &str| -> Result<String, ConfigError> {
            match p {
                Some(p) => read(p),
                None => Ok(default.to_string()),
            }
        };
        Ok(ResolvedConfig {
            linker_system_prompt: text_or(&self.linker_system_prompt, DEFAULT_SYSTEM_PROMPT)?,
            judge_system_prompt: text_or(&self.judge_system_prompt, JUDGE_SYSTEM_PROMPT)?,
            judge_user_template: text_or(&self.judge_user_template, JUDGE_USER_TEMPLATE)?,
            fewshot_store: self.fewshot_store.clone(),
            specs,
            linkers,
            policy,
            prices,
            linker_fewshots,
            raw: self,
        })
    }
}
