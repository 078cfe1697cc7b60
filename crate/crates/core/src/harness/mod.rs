//! Benchmark harness: datasets, the per-question pipeline, scoring, reports
//! and the offline analyses.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod fewshot;
pub mod linkeval;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use analysis::{bounds_analysis, ex_by_vote, BoundsRow, VoteRow};
pub use config::{CandidateConfig, ConfigError, LinkerPlan, PipelineConfig, ResolvedConfig};
pub use dataset::{db_path, default_db_root, load_dataset, BenchmarkItem, Dataset, DatasetError};
pub use fewshot::{build_fewshot_store, StoreBuild};
pub use linkeval::{link_eval, link_eval_text, LinkEvalRow};
pub use pipeline::{execution_accuracy, gold_signature, run_benchmark, Answer, Engine, ExOutcome, RunRecord};
pub use report::{aggregate, read_records, record_line, Report};
pub use sweep::{multiset_count, multisets, subset, sweep, SweepError, SweepOptions, SweepRow};
