//! Hyper-relational knowledge graph construction with lightweight LLMs.
//!
//! The pipeline extracts hyper-relational facts (a base triple plus
//! qualifiers) from text with one model, repairs them against the source text
//! with a second model, and scores the result with a fact-level,
//! embedding-based precision/recall/F1. Prompts are tuned by a budgeted beam
//! search over instructions and few-shot exemplars.

pub mod cli;
pub mod corpus;
pub mod correction;
pub mod evaluation;
pub mod extraction;
pub mod gateway;
pub mod hrkg;
pub mod pipeline;
pub mod prompt_opt;
pub mod stages;

pub use corpus::{Document, Exemplar, ExemplarStrategy};
pub use correction::{CorrectionPolicy, GroundingMode};
pub use evaluation::{Prf, ScoreReport, StrictMode};
pub use extraction::{parse_llm_output, PromptSpec};
pub use gateway::{EndpointConfig, Gateway, Role};
pub use hrkg::{HrkGraph, HyperRelationalFact, Qualifier};
