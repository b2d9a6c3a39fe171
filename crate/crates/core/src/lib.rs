//! Batch semantic classification, scoring and clustering of text records
//! with LLM annotations: correlation clustering over sampled same-class
//! judgments, cluster-to-label matching, and a budget-aware cascade.

pub mod assign;
pub mod cascade;
pub mod cluster;
pub mod edge;
pub mod error;
pub mod metrics;
pub mod model;
pub mod money;
pub mod oracle;
pub mod order;
pub mod pipeline;
pub mod seed;
pub mod simulate;

pub use error::{Error, OracleError, Result};
