use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TmudError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TmudError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {source_name}: {}", format_lines(.lines))]
    Parse {
        source_name: String,
        lines: Vec<(usize, String)>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("singular design matrix: {0}")]
    SingularDesign(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("checksum mismatch for {}", .path.display())]
    Checksum { path: PathBuf },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {stage} failed: {source}{}", last_good_hint(.last_good))]
    Stage {
        stage: String,
        last_good: Option<PathBuf>,
        #[source]
        source: Box<TmudError>,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn last_good_hint(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" (last good artifact: {})", p.display()),
        None => String::new(),
    }
}

fn format_lines(lines: &[(usize, String)]) -> String {
    lines
        .iter()
        .map(|(line, msg)| format!("line {line}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl TmudError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TmudError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        TmudError::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data/validation, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            TmudError::Config(_) => 1,
            TmudError::Stage { source, .. } => source.exit_code(),
            TmudError::SingularDesign(_)
            | TmudError::Training { .. }
            | TmudError::UndefinedCorrelation(_) => 3,
            _ => 2,
        }
    }
}
