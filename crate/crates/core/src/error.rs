use std::io;
use std::path::PathBuf;

use hashmoe_tensor::checkpoint::CheckpointError;
use hashmoe_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary size {max_size} too small: need room for {specials} specials and at least one token")]
    VocabTooSmall { max_size: usize, specials: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("need at least {needed} ids for batch={batch} seq={seq}, got {got}")]
    InsufficientTokens { needed: usize, got: usize, batch: usize, seq: usize },
    #[error("malformed vocabulary file at line {line}: {msg}")]
    VocabFormat { line: usize, msg: String },
    #[error("expert count must be at least 1")]
    NoExperts,
    #[error("cluster count {clusters} exceeds point count {points}")]
    TooManyClusters { clusters: usize, points: usize },
    #[error("clustered routing needs exactly one cluster per expert (clusters={clusters}, experts={experts})")]
    ClusterCountMismatch { clusters: usize, experts: usize },
    #[error("total token frequency is zero")]
    ZeroFrequency,
    #[error("vocabulary mismatch: expected digest {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("oracle routing needs future tokens; evaluation was not allowed to use them")]
    OracleNotAllowed,
    #[error("non-finite value at step {step}, first produced by op `{op}`")]
    NonFinite { step: u64, op: String },
    #[error("{0}")]
    Analysis(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })
}
