use thiserror::Error;

use crl_core::{CrlError, EncoderError, FlowError, MaskError, ShardError, TestbedError, VerifyError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error(transparent)]
    Testbed(#[from] TestbedError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error("toml parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
    #[error("toml write error: {0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 0 success, 1 validation error, 2 verification failure, 3 numerical abort.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 2,
            CliError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::NonFiniteLoss { .. } | EncoderError::Crl(CrlError::NonFinite(_)) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CrlError> for CliError {
    fn from(e: CrlError) -> Self {
        EncoderError::Crl(e).into()
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFinite => CliError::Numerical(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Testbed(t) => t.into(),
            VerifyError::Encoder(enc) => enc.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
