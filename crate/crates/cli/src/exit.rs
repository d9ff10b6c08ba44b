//! Process exit codes.

use bayesseg::Error;

pub const OK: u8 = 0;
pub const GRADCHECK: u8 = 1;
pub const FLAGS: u8 = 2;
pub const IO: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const MISMATCH: u8 = 5;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            error: error.into(),
        }
    }
}

pub fn code_for(err: &Error) -> u8 {
    match err {
        Error::Contract(_) => FLAGS,
        Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } | Error::Checkpoint(_) => IO,
        Error::Numeric(_) => NUMERIC,
        Error::Shape(_) | Error::Mismatch(_) => MISMATCH,
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure::new(code_for(&err), err)
    }
}

/// Attach context to a library error while keeping its exit code.
pub trait Context<T> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure>;
}

impl<T> Context<T> for Result<T, Error> {
    fn context(self, what: impl std::fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| {
            Failure::new(
                code_for(&e),
                anyhow::Error::new(e).context(what.to_string()),
            )
        })
    }
}
