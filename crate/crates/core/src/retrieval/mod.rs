//! Literature retrieval: the embedding interface, the in-batch contrastive
//! objective for training an embedder, an exact flat dot-product index and
//! per-step reference attachment.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::ProtocolError;

mod index;
mod loss;
mod references;

pub use index::{index_add, search_topk, FlatIndex, Hit, INDEX_MAGIC, INDEX_VERSION};
pub use loss::{contrastive_loss, contrastive_loss_grad, ContrastiveGrad};
pub use references::{attach_references, PhysicianLog};

pub const DEFAULT_DIMENSION: usize = 2048;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("query and paragraph batches differ in size ({queries} vs {paragraphs})")]
    BatchMismatch { queries: usize, paragraphs: usize },
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("doc_id `{0}` already indexed")]
    DuplicateDocId(String),
    #[error("embedder failed: {0}")]
    Embedding(String),
    #[error("no physician log entry for step {0}")]
    MissingPhysicianLog(usize),
    #[error("transcript has no final diagnosis")]
    MissingFinal,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps text to a fixed-dimension vector, the last-token hidden state of an
/// embedding model in production.
pub trait EmbeddingPort: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError>;
}

/// Deterministic test embedder: SHA-256 of the text seeds a generator whose
/// Gaussian draws are normalized to a unit vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        HashEmbedder { dimension }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_DIMENSION)
    }
}

impl EmbeddingPort for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let raw: Vec<f64> = (0..self.dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(raw.iter().map(|x| (x / norm) as f32).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    PubMed,
    StatPearls,
    #[serde(rename = "textbook")]
    Textbook,
    #[serde(rename = "other")]
    Other,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::PubMed => "PubMed",
            Source::StatPearls => "StatPearls",
            Source::Textbook => "Textbook",
            Source::Other => "Other",
        })
    }
}

/// Paragraph metadata as stored in the index sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub doc_id: String,
    pub source: Source,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedParagraph {
    #[serde(flatten)]
    pub paragraph: Paragraph,
    pub vector: Vec<f32>,
}
