//! Semantic uncertainty quantification for LLM question answering.
//!
//! The crate samples (or replays from a disk cache) multiple responses per
//! question, scores them with embedding-based SEU, entailment-cluster
//! semantic entropy, and token-likelihood baselines, evaluates every method
//! with Rouge-L correctness / AUROC / Youden's-J operating points, and
//! trains a desk-scale amortised variant that scores uncertainty in a
//! single forward pass.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod aseu;
pub mod clients;
pub mod dataset;
pub mod entropy;
pub mod evaluation;
pub mod geometry;
pub mod run;
