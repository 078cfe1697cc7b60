//! Text-to-SQL pipeline: schema catalogs and their textual representations,
//! LLM schema linking, candidate generation and confidence-aware selection,
//! plus the benchmark harness around them.

pub mod catalog;
pub mod generation;
pub mod harness;
pub mod linking;
pub mod llm;
pub mod representation;
pub mod selection;
pub mod util;

#[cfg(test)]
pub(crate) mod testutil;
