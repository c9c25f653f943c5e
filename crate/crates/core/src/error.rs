use alloc::string::String;

/// Errors raised by the numeric kernel, the model and the routing code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! param_err {
    ($($arg:tt)*) => { $crate::error::Error::Parameter(alloc::format!($($arg)*)) };
}
macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(alloc::format!($($arg)*)) };
}
pub(crate) use {input_err, param_err, shape_err};
