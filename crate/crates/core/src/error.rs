use thiserror::Error;

/// Errors surfaced by tensor arithmetic, module composition, checkpointing and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("layer {index} ({layer}) rejects input {input}: {reason}")]
    InadmissibleInput {
        index: usize,
        layer: String,
        input: String,
        reason: String,
    },

    #[error("junction {from} -> {to}: {reason}")]
    Junction {
        from: String,
        to: String,
        reason: String,
    },

    #[error("module `{0}` already present")]
    DuplicateModule(String),

    #[error("module `{0}` not found")]
    MissingModule(String),

    #[error("non-finite values detected in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("quality gate failed: {metric} = {value:.3}, required {requirement}")]
    QualityGate {
        metric: String,
        value: f64,
        requirement: String,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("seed batch mismatch: {0}")]
    SeedMismatch(String),

    #[error("frozen parameters changed during training: {0}")]
    FrozenViolated(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
