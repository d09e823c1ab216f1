//! Few-shot named entity recognition.
//!
//! A span detector tags mentions with BIOES labels under a constrained
//! Viterbi decoder; an entity classifier types each span by comparing it with
//! referent vectors built from natural-language type definitions. Both are
//! meta-trained on N-way K-shot episodes with first-order MAML.

pub mod classifier;
pub mod corpus;
pub mod episodes;
pub mod neural;
pub mod referents;
pub mod synthetic;
pub mod tagging;
pub mod detector;
pub mod llm;
pub mod metrics;
pub mod training;
