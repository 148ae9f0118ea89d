use std::path::Path;

use hinfctl::Error;

/// Failure of a command, carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Input(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Input(_) => 2,
            Self::Infeasible(_) => 3,
            Self::Internal(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InfeasibleAtGammaMax(_) => Self::Infeasible(msg),
            Error::DimensionMismatch(_)
            | Error::InvalidArgument(_)
            | Error::Parse(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::EmptyModel
            | Error::TieAtCut(_)
            | Error::RankDeficientJ => Self::Input(msg),
            _ => Self::Internal(msg),
        }
    }
}
