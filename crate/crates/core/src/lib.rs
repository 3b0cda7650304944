//! Hierarchical LLM-agent orchestration for building ML models.

// `!(x > 0.0)` is how NaN gets rejected along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod baselines;
pub mod config;
pub mod context;
pub mod digest;
pub mod lifecycle;
pub mod manager;
pub mod pipeline;
pub mod provider;
pub mod subagents;
pub mod tools;
pub mod workspace;
