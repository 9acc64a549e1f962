use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {got} samples, need at least {min}")]
    SignalTooShort { got: usize, min: usize },

    #[error("input too short: {got} frames, need at least {min}")]
    InputTooShort { got: usize, min: usize },

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("unsupported audio in {path}: {reason}")]
    UnsupportedAudio { path: PathBuf, reason: String },

    #[error("cannot normalize a matrix with {0} frame(s); need at least 2")]
    NormalizeTooFewFrames(usize),

    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("dialect `{0}` has no utterances")]
    EmptyDialect(String),

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("missing file for utterance `{id}`: {path}")]
    MissingFile { id: String, path: PathBuf },

    #[error("unknown label `{label}` for utterance `{id}`")]
    UnknownLabel { id: String, label: String },

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("zero variance in cohort column `{0}`")]
    ZeroVariance(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("fusion did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    FusionNotConverged { iterations: usize, grad_norm: f64 },

    #[error("score tables disagree: {0}")]
    TableMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Numerical or invariant failures, as opposed to bad user input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_) | Error::Diverged { .. } | Error::FusionNotConverged { .. } | Error::Shape(_)
        )
    }
}
