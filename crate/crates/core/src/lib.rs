//! Discrete-event simulator for KVCache-centric disaggregated LLM serving.
//!
//! A trace of requests (arrival time, prompt and output lengths, and the
//! prefix-chained block IDs of the prompt) is replayed against a cluster of
//! prefill and decoding instances. The pieces can also be used on their own:
//! [`kvcache`] for cache replay studies, [`perf_model`] for latency estimates,
//! [`conductor`] for scheduling decisions and [`overload`] for admission.

pub mod conductor;
pub mod config;
pub mod engine;
pub mod error;
pub mod kvcache;
pub mod metrics;
pub mod overload;
pub mod perf_model;
pub mod reports;
pub mod trace;

pub use engine::{run, run_observed, ClusterConfig, SimConfig, SimReport, Step};
pub use error::{Error, Result};
