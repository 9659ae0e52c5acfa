use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("training corpus is empty")]
    CorpusEmpty,
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("watermark embedding diverged at step {step} (loss {loss})")]
    EmbedDiverged { step: usize, loss: f64 },
    #[error("mask index {index} out of range for layer `{layer}` (len {len})")]
    MaskOutOfRange { layer: String, index: usize, len: usize },
    #[error("mask references unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("prompt of {len} bytes does not fit the {context_len}-byte context")]
    PromptTooLong { len: usize, context_len: usize },
    #[error("sequence of {len} bytes exceeds the {context_len}-byte context")]
    SequenceTooLong { len: usize, context_len: usize },
    #[error("empty batch or sample")]
    EmptyBatch,
    #[error("perturbation shape mismatch: {0}")]
    PerturbationShape(String),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated")]
    TruncatedFile,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("rule string length {0} must be a positive multiple of 5")]
    BadLength(usize),
    #[error("could not build a watermark suite: {0}")]
    SuiteBuildFailed(String),
    #[error("held-out corpus has {have} bytes, need at least {need}")]
    CorpusTooSmall { have: usize, need: usize },
    #[error("cannot draw {requested} distinct tags of length {tag_len}")]
    TagSpaceExhausted { requested: usize, tag_len: usize },
    #[error("invalid tag length {0} (allowed 4..=32)")]
    BadTagLength(usize),
    #[error("user registry: {0}")]
    BadRegistry(String),
    #[error("model shapes differ: {0}")]
    ModelShapeMismatch(String),
    #[error("score weights must be non-negative and finite (alpha {alpha}, beta {beta})")]
    BadWeights { alpha: f64, beta: f64 },
    #[error("t = {t} exceeds the {available} selectable entries of layer `{layer}`")]
    TTooLarge { layer: String, t: usize, available: usize },
    #[error("suspect model unavailable after {answered} answered queries: {reason}")]
    SuspectUnavailable {
        answered: usize,
        reason: String,
        /// `(prompt, output)` pairs answered before the failure.
        transcript: Vec<(Vec<u8>, Vec<u8>)>,
    },
    #[error("k = {k} exceeds samples_per_task = {samples}")]
    BadK { k: usize, samples: usize },
    #[error("pass@k reports use different k sets")]
    KMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}
