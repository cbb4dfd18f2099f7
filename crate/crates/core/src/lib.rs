//! Question-driven VQA re-ranking for composed image retrieval.
//!
//! A modification text is decomposed into yes/no visual questions, each
//! top-ranked candidate is scored by a VQA backend on those questions, and
//! the compressed VQA score is fused with the normalized base retrieval
//! score. The crate also builds balanced yes/no VQA corpora and computes the
//! retrieval and classifier metrics used to evaluate the pipeline.

pub mod clients;
pub mod dataset;
pub mod domain;
pub mod evaluation;
pub mod formats;
pub mod question_generation;
pub mod rerank;
pub mod scoring;

pub use domain::{
    Answer, AnswerProbability, AnswerTokens, CandidateScore, CandidateSet, Category, CirScore,
    Ranking, ReasoningTrace, RerankConfig, RetrievalQuery, Triplet, VisualQuestion,
};
pub use rerank::{RerankEngine, RerankError, RerankOutput};
