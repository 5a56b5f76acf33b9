use serde::Serialize;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(flowrde_core::Error),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<flowrde_core::Error> for CliError {
    fn from(e: flowrde_core::Error) -> Self {
        CliError::Numeric(e)
    }
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// 1 for numerical failures, 2 for usage and configuration errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(e) => match e {
                flowrde_core::Error::Domain(_) | flowrde_core::Error::Structure(_) | flowrde_core::Error::Capability(_) => 2,
                _ => 1,
            },
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Csv(_) | CliError::Json(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Numeric(e) => match e {
                flowrde_core::Error::Structure(_) => "structure",
                flowrde_core::Error::Domain(_) => "domain",
                flowrde_core::Error::Resolution(_) => "resolution",
                flowrde_core::Error::Capability(_) => "capability",
                flowrde_core::Error::Numeric(_) => "numeric",
                flowrde_core::Error::Horizon(_) => "horizon",
                flowrde_core::Error::Precision(_) => "precision",
            },
            CliError::Io { .. } => "io",
            CliError::Csv(_) => "csv",
            CliError::Json(_) => "json",
        }
    }

    /// Structured form written to stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
            exit_code: i32,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        let w = Wrapper { error: Body { kind: self.kind(), message: self.to_string(), exit_code: self.exit_code() } };
        serde_json::to_string(&w).unwrap_or_else(|_| format!("{{\"error\":{{\"message\":\"{self}\"}}}}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
