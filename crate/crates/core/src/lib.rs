//! Desk-scale knowledge-graph-infused fine-tuning.
//!
//! The crate wires together five model pieces and the tooling around them:
//!
//! - [`numerics`] — dense f64 tensors with reverse-mode autodiff and optimizers;
//!   everything differentiable in the crate is built on this tape and can be
//!   checked against central finite differences.
//! - [`kgdata`] — triple/TSV ingestion, relation-indexed graphs, hop-bounded
//!   subgraphs, coverage sampling, structural perturbation, entity linking and
//!   a synthetic cloze-corpus generator.
//! - [`graph_encoder`] — a relational graph convolution stack producing
//!   per-entity embeddings.
//! - [`context_encoder`] — a small causal transformer with entity-prediction
//!   and next-token heads.
//! - [`fusion`] — per-token knowledge attention plus a sigmoid gate mixing
//!   contextual and structural representations.
//! - [`training`] — the joint task + alignment objective, the training loop,
//!   and checkpoint persistence.
//! - [`harness`] — accuracy/F1/BLEU metrics, the learning-rate, coverage and
//!   perturbation sweeps, and CSV/JSON/SVG report emission.

pub mod context_encoder;
pub mod fusion;
pub mod graph_encoder;
pub mod kgdata;
pub mod numerics;
