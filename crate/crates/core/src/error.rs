use alloc::string::String;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Labelled tree input that is not a rooted tree.
    Structure(String),
    /// Argument outside the domain of an operation.
    Domain(String),
    /// Grid too coarse for the requested scale.
    Resolution(String),
    /// A vector field lacks a derivative the computation needs.
    Capability(String),
    /// Numerical breakdown (non positive definite matrix, blow-up, no contraction).
    Numeric(String),
    /// A solve left the trusted region of the field or failed to contract.
    Horizon(String),
    /// A quadrature did not reach its precision target.
    Precision(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Structure(m) => write!(f, "structural error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Resolution(m) => write!(f, "resolution error: {m}"),
            Error::Capability(m) => write!(f, "capability error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Horizon(m) => write!(f, "horizon error: {m}"),
            Error::Precision(m) => write!(f, "precision error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

/// Shorthand for building an error from a format string.
#[macro_export]
macro_rules! err {
    ($kind:ident, $($arg:tt)*) => {
        $crate::error::Error::$kind(alloc::format!($($arg)*))
    };
}
