use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{source_name}:{line}: {msg}")]
    Config { source_name: String, line: usize, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{0}")]
    Core(#[from] ternatraj::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit status; 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        use ternatraj::Error as E;
        match self {
            CliError::Config { .. } | CliError::UnknownKey(_) | CliError::BadValue { .. } => 3,
            CliError::MissingFile(_) => 4,
            CliError::Io { .. } => 5,
            CliError::Core(e) => match e {
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
                E::Io { .. } => 5,
                E::Shape { .. } | E::Mismatch { .. } | E::SeqLength { .. } | E::Index { .. } => 6,
                E::Corrupt(_) | E::Parse { .. } | E::NotTernary { .. } => 7,
                E::NonFinite { .. } => 8,
                E::Invalid(_) | E::UnknownScene(_) => 9,
                _ => 1,
            },
        }
    }

    /// Short category used in the one-line error report.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            3 => "config",
            4 => "missing_file",
            5 => "io",
            6 => "shape_mismatch",
            7 => "corrupt_input",
            8 => "diverged",
            9 => "invalid",
            _ => "internal",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path)
        } else {
            CliError::Io { path, source }
        }
    }

    /// `error kind=<kind> code=<n> msg=<json string>` on one line.
    pub fn report_line(&self) -> String {
        let msg = serde_json::to_string(&self.to_string()).expect("strings serialize");
        format!("error kind={} code={} msg={msg}", self.kind(), self.exit_code())
    }
}

pub type CliResult<T> = Result<T, CliError>;
