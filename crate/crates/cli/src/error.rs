use std::path::Path;

use serde_json::{json, Map, Value};

#[derive(Debug)]
pub enum CliError {
    Core(emoq_core::Error),
    Usage(String),
    Image(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<emoq_core::Error> for CliError {
    fn from(e: emoq_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Core(emoq_core::Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Image(_) => "image",
        }
    }

    /// Single-line JSON: `kind` and `message`, plus `key`, `line` or
    /// `offset` when the error carries them.
    pub fn to_line(&self) -> String {
        let mut obj = Map::new();
        obj.insert("kind".into(), json!(self.kind()));
        match self {
            CliError::Core(emoq_core::Error::Config { key, line, msg }) => {
                if let Some(k) = key {
                    obj.insert("key".into(), json!(k));
                }
                if let Some(l) = line {
                    obj.insert("line".into(), json!(l));
                }
                obj.insert("message".into(), json!(msg));
            }
            CliError::Core(emoq_core::Error::Format { offset, msg }) => {
                obj.insert("offset".into(), json!(offset));
                obj.insert("message".into(), json!(msg));
            }
            CliError::Core(e) => {
                obj.insert("message".into(), json!(e.to_string()));
            }
            CliError::Usage(m) | CliError::Image(m) => {
                obj.insert("message".into(), json!(m));
            }
        }
        Value::Object(obj).to_string()
    }
}
