use thiserror::Error;

/// Failure to parse the canonical text encoding.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("bad value for `{0}`: {1:?}")]
    BadValue(&'static str, String),
    #[error("malformed token {0:?} (expected key=value)")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VariantError {
    #[error("unknown variant flag {0:?}")]
    UnknownFlag(String),
    #[error("tdt requires unknown_states")]
    TdtWithoutUnknown,
    #[error("release_messages requires coordinator_commit_log")]
    ReleaseWithoutCommitLog,
    #[error("clear_stage and coordinator_commit_log are alternative designs and cannot be combined")]
    ClearStageWithCommitLog,
    #[error("clear_stage and d2pc_clear cannot be combined")]
    ClearStageWithD2pc,
}

/// Scenario parse or validation failure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported scenario version {0}")]
    Version(u32),
    #[error("validation error: {0}")]
    Invalid(String),
    #[error(transparent)]
    Variant(#[from] VariantError),
}

impl ScenarioError {
    pub fn is_parse(&self) -> bool {
        matches!(self, ScenarioError::Parse(_) | ScenarioError::Version(_))
    }
}
