//! Command implementations behind the `xmodal` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;

use xmodal_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_RUNTIME,
    }
}
