//! Explanation-guided few-shot classification of tabular data.
//!
//! Rows are serialized into short sentences, a large model explains which
//! features drive a sample of labelled rows, and the aggregated importance
//! filters the text used to pick in-context demonstrations for a smaller
//! surrogate model.

pub mod dataset;
pub mod exec;
pub mod explainer;
pub mod harness;
pub mod inference;
pub mod providers;
pub mod selector;
pub mod serializer;

pub use exec::Exec;
pub use harness::{run_pipeline, HarnessError, RunConfig, RunReport, Session};
