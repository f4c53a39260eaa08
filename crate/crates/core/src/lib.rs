//! Trace-driven federated-learning simulator with a multi-agent
//! reinforcement-learning client-selection engine.
//!
//! The library is organized around the stages of one training round:
//!
//! - [`nn`]: dense MLP kernel (forward, backprop, SGD) shared by the FL
//!   task model and the agent Q-networks.
//! - [`data`]: synthetic classification datasets and non-IID client shards.
//! - [`traces`]: per-device training/upload/download latency traces and
//!   communication costs.
//! - [`engine`]: the round loop — probing training, client selection,
//!   completion, weighted aggregation, scoring.
//! - [`marl`]: per-agent state construction, shared Q-networks, replay
//!   buffer, VDN temporal-difference training and greedy inference.
//! - [`policies`]: selection baselines plus the trained MARL policy behind
//!   one interface.
//! - [`analysis`]: reward and objective computation, weight-divergence
//!   diagnostics, summary reports.
//! - [`config`] / [`experiment`]: reproducible end-to-end experiments
//!   driven by one config file and one master seed.

pub mod analysis;
pub mod config;
pub mod data;
pub mod engine;
pub mod experiment;
pub mod marl;
pub mod nn;
pub mod policies;
pub mod rng;
pub mod traces;

use std::path::PathBuf;

/// Errors shared across the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("selection mask has no selected client")]
    EmptyMask,
    #[error("replay buffer has {have} transitions, need {need}")]
    InsufficientBuffer { have: usize, need: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("infeasible partition demand: {0}")]
    Infeasible(String),
    #[error("missing trace cell: {0}")]
    MissingTraceCell(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("unknown policy: {0}")]
    UnknownPolicy(String),
    #[error("{file}:{line}: {msg}")]
    Malformed {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
