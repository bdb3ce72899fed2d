use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("{op}: invalid attribute: {msg}")]
    InvalidAttr { op: &'static str, msg: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{what} too short: {len} samples, need at least {min}")]
    TooShort {
        what: &'static str,
        len: usize,
        min: usize,
    },

    #[error("{what}: expected {expected} channel(s), got {got}")]
    ChannelCount {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("silent source: {0} has zero power")]
    SilentSource(&'static str),

    #[error("malformed WAV header: {0}")]
    MalformedWav(String),

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedWav(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("reference signal is all zero")]
    ZeroReference,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("insufficient speakers: {got} given, need at least {min}")]
    InsufficientSpeakers { got: usize, min: usize },

    #[error("line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("non-finite loss on mixture `{mixture_id}`")]
    NanLoss { mixture_id: String },

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("IPD features required by ipd_mode={0} but not supplied")]
    MissingIpd(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numeric breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NanLoss { .. })
    }
}
