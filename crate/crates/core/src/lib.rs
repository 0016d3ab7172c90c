//! Text-to-SQL data synthesis and evaluation.
//!
//! The crate turns seed web tables into `<database, question, SQL, chain-of-thought>`
//! samples through four LLM-driven stages (database synthesis, complexity-aware
//! SQL generation, stylized question back-translation, CoT synthesis with
//! execution-grouped voting) and evaluates text-to-SQL predictions with
//! execution accuracy.
//!
//! Module map:
//!
//! - [`llm`]: chat/embedding gateway, HTTP backend, scripted mocks.
//! - [`ingest`]: web-table loading and the four-step filter.
//! - [`schema`]: schema model, JSON format, generation/enhancement prompts, SQLite materialization.
//! - [`query_synth`]: SQL prompt construction, candidate post-processing, per-database generation.
//! - [`question_synth`]: stylized question prompts, parsing, semantic-consistency selection.
//! - [`cot_synth`]: CoT prompts, final-SQL extraction, majority vote, sample finalization.
//! - [`sql`]: templates, skeletons, feature counting, corpus statistics.
//! - [`exec`]: sandboxed execution, result comparison and fingerprints, vote grouping.
//! - [`eval`]: EX evaluation, benchmark loaders, LLM-judge quality scoring.
//! - [`export`]: training-pair construction with enriched DDL.
//! - [`pipeline`]: config, manifest, checkpointed runs, resume, reports.

pub mod catalog;
pub mod cot_synth;
pub mod eval;
pub mod exec;
pub mod export;
pub mod ingest;
pub mod llm;
pub mod pipeline;
pub mod query_synth;
pub mod question_synth;
pub mod schema;
pub mod sql;
pub mod text;

pub use catalog::Catalog;
pub use cot_synth::DataSample;
pub use exec::{ExecOutcome, ResultFingerprint};
pub use ingest::WebTable;
pub use llm::{ChatRequest, ChatResponse, Gateway, ProviderConfig};
pub use query_synth::{ComplexityLevel, SqlSample};
pub use question_synth::{LanguageStyle, StylizedQuestion};
pub use schema::SchemaDef;
pub use sql::SqlFeatures;
