use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: alloc::vec::Vec<usize>,
        rhs: alloc::vec::Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value in {0}")]
    Numeric(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
