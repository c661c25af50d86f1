use mhd_core::MhdError;

/// Exit code for invalid configurations.
pub const EXIT_CONFIG: u8 = 2;
/// Exit code for training divergence.
pub const EXIT_DIVERGENCE: u8 = 3;

/// A command failure and the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<MhdError> for Failure {
    fn from(e: MhdError) -> Self {
        let code = match e {
            MhdError::Config { .. } => EXIT_CONFIG,
            MhdError::Divergence { .. } => EXIT_DIVERGENCE,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::other(e.to_string())
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}
