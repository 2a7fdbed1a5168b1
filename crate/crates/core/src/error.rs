use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sigma statistics are empty; train the reference stage first")]
    UnpopulatedStats,

    #[error("unknown variant tag `{0}` (expected one of A, B, C, D, E, F)")]
    UnknownVariant(String),

    #[error("variant {0} needs reference artifacts (ideal policy + dynamics model)")]
    MissingReference(char),

    #[error("trajectory has {len} steps but the disturbance onset is at step {onset}")]
    TrajectoryTooShort { len: usize, onset: usize },

    #[error("training failed: {0}")]
    Training(String),

    #[error("corrupt checkpoint (block `{block}`): {reason}")]
    CorruptCheckpoint { block: String, reason: String },

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("config fingerprint mismatch: checkpoint {checkpoint}, active config {active} (use --force to override)")]
    FingerprintMismatch { checkpoint: String, active: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
