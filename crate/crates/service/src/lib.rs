//! HTTP service and command-line front end for clinflow.

use std::sync::Arc;

use clinflow_core::llm::{DirectorClient, ReplayModel};

pub mod cli;
pub mod config;
pub mod http;
pub mod sessions;

/// Hands each case its own director. Replays get a fresh per-case cursor so
/// runs are reproducible; live endpoints are shared.
#[derive(Clone)]
pub enum DirectorSource {
    Shared(Arc<dyn DirectorClient>),
    Replay(Arc<ReplayModel>),
}

impl DirectorSource {
    pub fn for_case(&self, case_id: &str) -> Box<dyn DirectorClient> {
        match self {
            DirectorSource::Shared(d) => Box::new(Arc::clone(d)),
            DirectorSource::Replay(r) => Box::new(r.for_case(case_id)),
        }
    }
}

/// An input the user supplied was invalid; the CLI exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ValidationError(pub String);

pub fn invalid(msg: impl std::fmt::Display) -> anyhow::Error {
    anyhow::Error::new(ValidationError(msg.to_string()))
}
