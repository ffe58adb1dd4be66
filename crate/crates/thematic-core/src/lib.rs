//! # thematic-core
//!
//! An engine for LLM-assisted inductive thematic analysis of long interview
//! transcripts, with a quantitative evaluation suite for comparing generated
//! themes against a human-coded reference set.
//!
//! ## Pipeline
//!
//! 1. Load transcripts as ordered speaker turns and split them into
//!    conversation-preserving chunks of up to 1,500 words.
//! 2. Prompt a chat model to code each chunk: every code carries a concise
//!    name, a description, and verbatim quotes verified against the source.
//! 3. Concatenate all codes and divide them into sequential groups under a
//!    serialized-word budget.
//! 4. Synthesize preliminary themes per group, optionally refine them with a
//!    critique/regenerate round, then synthesize final themes across groups.
//! 5. Score final themes against a ground-truth set: pairwise similarity
//!    matrices (embedding cosine or model-as-judge), threshold binarization,
//!    Jaccard similarity and hit rate, with sensitivity sweeps and CSV
//!    heatmap export.
//!
//! A whole-transcript, no-chunking baseline flow is included for
//! head-to-head comparison, along with a deterministic mock provider so the
//! entire pipeline runs offline in tests.
//!
//! ## Modules
//!
//! - [`corpus`] — transcript loading, speaker turns, chunking
//! - [`gateway`] — chat/embedding providers, caching, retries, mock
//! - [`prompts`] — prompt templates and strategy-aware rendering
//! - [`codegen`] — initial coding and sequential grouping
//! - [`theming`] — preliminary/final themes and Reflexion refinement
//! - [`evaluation`] — similarity matrices, metrics, sweeps, CSV export
//! - [`baseline`] — the whole-transcript comparison method
//! - [`config`] — TOML configuration and CLI overrides
//! - [`pipeline`] — run orchestration, manifests, resume, reports

pub mod baseline;
pub mod codegen;
pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod prompts;
pub mod theming;

pub use codegen::{Code, CodeGroup};
pub use corpus::{Chunk, Transcript, Turn};
pub use evaluation::{BinaryMatrix, EvaluationReport, GroundTruth, SimilarityMatrix};
pub use gateway::{ChatRequest, ChatResponse, EmbeddingVector, Gateway};
pub use pipeline::{RunManifest, StageTiming};
pub use prompts::{Strategy, StrategyKind, StudyContext};
pub use theming::{Critique, Theme};
