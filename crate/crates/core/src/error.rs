use crate::model::Timestamp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("metric name must not be empty")]
    EmptyMetric,
    #[error("label name must not be empty")]
    EmptyLabelName,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("sample value must be finite")]
    NonFiniteValue,
    #[error("invalid time window: start {start} must be < end {end}")]
    InvalidWindow { start: Timestamp, end: Timestamp },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sketch configurations do not match: {0}")]
    MismatchedConfig(&'static str),
    #[error("sketch is empty")]
    EmptySketch,
    #[error("out-of-order sample at {ts} (newest seen {newest})")]
    OutOfOrder { ts: Timestamp, newest: Timestamp },
    #[error("duplicate sample at {0}")]
    Duplicate(Timestamp),
    #[error("query window is outside the retained window")]
    QueryOutsideWindow,
    #[error("window holds no buckets")]
    EmptyWindow,
    #[error("no samples in the requested range")]
    EmptyRange,
    #[error("at least {needed} samples required, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unsupported function `{0}`")]
    UnsupportedFunction(String),
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("function `{func}` needs numeric samples")]
    NotNumeric { func: &'static str },
    #[error("malformed snapshot: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(pos: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            pos,
            msg: msg.into(),
        }
    }
}
