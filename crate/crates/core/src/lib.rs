//! Federated LoRA fine-tuning with interleaved targeted unlearning, at desk scale.
//!
//! A frozen bigram language model is adapted by a low-rank adapter that
//! simulated clients train on private synthetic QA facts. A server combines
//! client adapters with one of six aggregation rules, unlearning requests
//! apply one of four forgetting objectives to the global adapter, and an
//! evaluation suite measures how much was forgotten and how much utility
//! survived.

pub mod checkpoint;
pub mod cli;
pub mod client;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod report;
pub mod rng;
pub mod server;
pub mod unlearning;

pub use error::{Error, Result};
pub use params::FlatParams;
