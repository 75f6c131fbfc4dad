//! Library side of the `mixformer` binary, so commands can be driven from
//! tests without a subprocess.

pub mod commands;
pub mod config;

use mixformer::Error;

/// Process exit code for an error: 2 config, 3 data or I/O, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Lookup { .. } | Error::Io(_) => 3,
        Error::Numeric(_) | Error::UndefinedMetric(_) => 4,
    }
}
