use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// An eigenvalue of a unitary sits on the principal-logarithm cut at -1.
    #[error("eigenvalue {eigenvalue_re:.3e}{eigenvalue_im:+.3e}i lies on the logarithm branch cut")]
    BranchCut { eigenvalue_re: f64, eigenvalue_im: f64 },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
