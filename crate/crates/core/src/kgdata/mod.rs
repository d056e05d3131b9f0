//! Knowledge-graph data handling: TSV triple ingestion, relation-indexed
//! graphs, hop-bounded entity subgraphs, coverage sampling, structural
//! perturbation, mention linking, JSONL sentence IO, and a synthetic
//! KG + cloze-corpus generator for desk-scale experiments.
//!
//! All randomized operations are pure functions of their inputs and a seed;
//! nothing here keeps hidden RNG state.

mod graph;
pub mod hash;
mod linking;
mod sentence;
mod subgraph;
mod synth;

pub use graph::{parse_triples, Edge, KnowledgeGraph, Triple};
pub use linking::link_entities;
pub use sentence::{read_sentences, write_sentences, LinkedSentence, Mention, Target};
pub use subgraph::{extract_subgraph, perturb_structure, sample_coverage, EntitySubgraph, PerturbMode};
pub use synth::{gen_synthetic, SyntheticConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: expected 3 tab-separated fields, got {got}")]
    BadFieldCount { line: usize, got: usize },
    #[error("line {line}: empty field in triple")]
    EmptyField { line: usize },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("{what} must lie in [0, 1], got {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("relation relabeling needs at least 2 relations, graph has {0}")]
    UnsupportedPerturbation(usize),
    #[error("invalid synthetic config: {0}")]
    BadConfig(String),
    #[error("invalid sentence at line {line}: {reason}")]
    BadSentence { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;
