use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("budget exceeded in {stage}: need {needed}, budget {budget}{hint}")]
    Budget {
        stage: &'static str,
        needed: u128,
        budget: u128,
        hint: &'static str,
    },
    #[error("non-finite boundary: {0}")]
    NonFiniteBoundary(String),
    #[error("not polynomial in z: {0}")]
    NotPolynomial(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("label mismatch on complement component containing site {site}: labels {labels:?}")]
    LabelMismatch { site: usize, labels: Vec<u8> },
    #[error("internal consistency violation: {0}")]
    Internal(String),
    #[error("cluster expansion not certified: {0}")]
    NotCertified(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn budget(stage: &'static str, needed: u128, budget: u128) -> Error {
    Error::Budget {
        stage,
        needed,
        budget,
        hint: "",
    }
}
