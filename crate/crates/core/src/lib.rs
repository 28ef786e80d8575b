//! Representation-bias auditing for LLM-generated occupational stories:
//! demographic classification, parity metrics, statistics, a chat backend
//! abstraction, the generate / explain / regenerate pipeline and reports.

pub mod backend;
pub mod cli;
pub mod demographics;
pub mod extraction;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod store;
pub mod templates;
