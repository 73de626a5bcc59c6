use std::fmt;

/// Exit code for bad flags, configs, selectors or unreadable inputs.
pub const EXIT_USAGE: u8 = 2;
/// Exit code for divergence, non-finite values and failed gradient checks.
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Diagnostics are a single line.
        write!(f, "{}", self.message.replace('\n', " "))
    }
}

impl From<redlab::Error> for CliError {
    fn from(e: redlab::Error) -> Self {
        use redlab::Error as E;
        match e {
            E::Divergence { .. } | E::NonFinite(_) | E::DegenerateEmbedding { .. } | E::DegenerateCandidate { .. } => {
                Self::numeric(e.to_string())
            }
            _ => Self::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
