//! Pipeline driver for the xvector toolkit: configuration, the stages behind
//! every subcommand, and exit-code mapping.

pub mod config;
pub mod pipeline;

use xvector::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Dimension(_)
        | Error::Domain(_)
        | Error::Format { .. }
        | Error::Parse { .. }
        | Error::InputTooShort { .. }
        | Error::Io(_) => EXIT_DATA,
    }
}
