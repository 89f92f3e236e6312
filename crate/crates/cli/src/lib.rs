//! Library side of the `vsdnerf` binary: configuration and pipeline commands.

pub mod config;
pub mod lock;
pub mod pipeline;

use vsdnerf::Error;

/// Process exit code for an error: 2 configuration, 3 data or filesystem,
/// 4 numerical or freeze violations.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Ingestion { .. } | Error::Io { .. } | Error::Image { .. } | Error::Json(_) | Error::Shape(_) => 3,
        Error::Numerical(_) | Error::Freeze(_) => 4,
    }
}
