use neurogen::arch::ArchError;
use neurogen::data::DataError;
use neurogen::generator::GenError;
use neurogen::refcorpus::RefError;
use neurogen::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Unbounded(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn config(pointer: impl Into<String>, message: impl ToString) -> Self {
        CliError::Config {
            pointer: pointer.into(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Diverged(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Unbounded(_) => 5,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<ArchError> for CliError {
    fn from(e: ArchError) -> Self {
        match e {
            ArchError::ArchMismatch { .. } | ArchError::Length { .. } | ArchError::File(_) => CliError::Mismatch(e.to_string()),
            ArchError::Io(e) => CliError::Io(e),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::SubsetTooLarge { .. } | DataError::EmptySubset => CliError::config("/stage2/m", e),
            other => CliError::config("/dataset", other),
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::Arch(a) => a.into(),
            GenError::HeadMismatch { .. } | GenError::File(_) | GenError::Context(_) => CliError::Mismatch(e.to_string()),
            GenError::Config(_) => CliError::config("/generator", e),
            GenError::SequenceOverflow { .. } => CliError::config("/generator/max_seq_len", e),
            GenError::Io(e) => CliError::Io(e),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<RefError> for CliError {
    fn from(e: RefError) -> Self {
        match e {
            RefError::Diverged { .. } => CliError::Diverged(e.to_string()),
            RefError::Seed { ref source, .. } if matches!(**source, RefError::Diverged { .. }) => CliError::Diverged(e.to_string()),
            RefError::Config(_) => CliError::config("/reference", e),
            RefError::InputMismatch { .. } | RefError::ClassMismatch { .. } => CliError::config("/arch", e),
            RefError::File(_) => CliError::Mismatch(e.to_string()),
            RefError::Arch(a) => a.into(),
            RefError::Data(d) => d.into(),
            RefError::Io(e) => CliError::Io(e),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            TrainError::UnboundedLogits { .. } => CliError::Unbounded(e.to_string()),
            TrainError::CorpusMismatch { .. } => CliError::Mismatch(e.to_string()),
            TrainError::Config(_) => CliError::config("/stage2", e),
            TrainError::Gen(g) => g.into(),
            TrainError::Arch(a) => a.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Io(e) => CliError::Io(e),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
