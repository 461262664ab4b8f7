use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing upstream artifact {}: run `trlf {stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error(transparent)]
    Core(#[from] trlf_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use trlf_core::Error as E;
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::MissingArtifact { .. } => EXIT_MISSING,
            Self::Core(E::NonFinite(_) | E::Numerical(_)) => EXIT_NUMERICAL,
            Self::Core(E::InvalidArgument(_)) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}
