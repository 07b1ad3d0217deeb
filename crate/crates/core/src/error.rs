use thiserror::Error;

/// Errors raised anywhere in the numeric core and the pipeline built on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error{}: {msg}", fmt_key_line(.key, .line))]
    Config {
        key: Option<String>,
        line: Option<usize>,
        msg: String,
    },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("frozen parameter `{0}` changed during stage")]
    FrozenDrift(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn fmt_key_line(key: &Option<String>, line: &Option<usize>) -> String {
    match (key, line) {
        (Some(k), Some(l)) => format!(" (key `{k}`, line {l})"),
        (Some(k), None) => format!(" (key `{k}`)"),
        (None, Some(l)) => format!(" (line {l})"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            key: None,
            line: None,
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Config { .. } => "config",
            Error::Lookup(_) => "lookup",
            Error::Format { .. } => "format",
            Error::Capability(_) => "capability",
            Error::FrozenDrift(_) => "frozen-drift",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
