//! Diagnosis engine for database performance anomalies.

pub mod agents;
pub mod causes;
pub mod engine;
pub mod eval;
pub mod knowledge;
pub mod llm;
pub mod planner;
pub mod prompt_gen;
pub mod prompts;
pub mod report;
pub mod retrieval;
pub mod sim;
pub mod tokens;
pub mod toolbox;
pub mod tools;
