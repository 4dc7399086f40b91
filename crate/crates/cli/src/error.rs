use std::path::PathBuf;
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(flowhn_core::Error),
}

impl From<flowhn_core::Error> for CliError {
    fn from(e: flowhn_core::Error) -> Self {
        match e {
            flowhn_core::Error::Config(v) => CliError::Config(v),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn kind(&self) -> &'static str {
        use flowhn_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                E::Config(_) => "config",
                E::Split(_) => "split",
                E::Shape(_) => "shape",
                E::NonFinite { .. } => "non_finite",
                E::TokenOutOfRange { .. } => "token_out_of_range",
                E::Checkpoint(_) => "checkpoint",
                E::Corpus(_) => "corpus",
                E::InvalidArgument(_) => "invalid_argument",
                E::Io(_) => "io",
            },
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) | CliError::Config(_) => ExitCode::from(2),
            _ => ExitCode::from(1),
        }
    }

    /// Single-line JSON diagnostic for stderr.
    pub fn to_line(&self) -> String {
        let mut obj = serde_json::json!({ "kind": self.kind(), "message": self.to_string() });
        if let CliError::Config(v) = self {
            obj["violations"] = serde_json::json!(v);
        }
        format!("error: {obj}")
    }
}
