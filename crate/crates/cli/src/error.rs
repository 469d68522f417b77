use std::path::Path;

/// Command failure; `Display` is the one-line report printed to stderr.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("error kind=config key={key} msg={msg:?}")]
    Config { key: String, msg: String },
    #[error("error kind=file path={path} msg={msg:?}")]
    File { path: String, msg: String },
    #[error("error kind=numeric msg={0:?}")]
    Numeric(String),
}

impl CliError {
    pub fn config(key: &str, msg: impl Into<String>) -> Self {
        CliError::Config { key: key.to_owned(), msg: msg.into() }
    }

    pub fn file(path: &Path, msg: impl Into<String>) -> Self {
        CliError::File { path: path.display().to_string(), msg: msg.into() }
    }

    /// Wraps a library error raised while working on `path`.
    pub fn at(path: &Path, e: deepide::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::file(path, e.to_string())
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::File { .. } => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<deepide::Error> for CliError {
    fn from(e: deepide::Error) -> Self {
        match e {
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            e if e.is_io() => CliError::File { path: "-".into(), msg: e.to_string() },
            // bad shapes or arguments reaching the library trace back to the configuration
            e => CliError::config("-", e.to_string()),
        }
    }
}
