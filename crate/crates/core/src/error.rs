use crate::uarch::ProbeKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{kind} is not available on {profile}")]
    Unsupported { profile: String, kind: ProbeKind },
    #[error("{kind} cannot be used against a shared read-only line")]
    Permission { kind: ProbeKind },
    #[error("{kind} does not raise SMC conflicts on {profile}")]
    NotApplicable { profile: String, kind: ProbeKind },
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("feature vector has {got} dimensions, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Whether the error means the requested strategy or processor is not
    /// available, as opposed to malformed input.
    pub fn is_unsupported(&self) -> bool {
        matches!(
            self,
            Error::Unsupported { .. }
                | Error::Permission { .. }
                | Error::NotApplicable { .. }
                | Error::UnknownProfile(_)
        )
    }
}
