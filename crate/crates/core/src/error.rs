use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate news id `{0}`")]
    DuplicateId(String),

    #[error("item `{0}` is in a labeled split but has no label")]
    MissingLabel(String),

    #[error("unknown news id `{0}`")]
    UnknownId(String),

    #[error("empty text for `{0}`")]
    EmptyText(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value at node {node} in layer {layer}")]
    NonFinite { node: usize, layer: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("llm call failed after {attempts} attempts: {msg}")]
    Llm { attempts: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("workspace `{0}` is locked by another run")]
    Locked(PathBuf),

    #[error("missing stage output `{0}`; run the earlier stage first")]
    MissingStage(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
