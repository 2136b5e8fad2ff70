//! Library side of the `rulecraft` command: configuration, the training and
//! evaluation pipeline, and exit-code mapping.

pub mod config;
pub mod pipeline;
pub mod verify;

use rulecraft::Error;

pub use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_INCOMPATIBLE: i32 = 5;

/// Process exit status for an error anywhere in its chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidConfig(_) => EXIT_CONFIG,
                Error::Parse { .. } | Error::Io { .. } | Error::Checkpoint(_) => EXIT_DATA,
                Error::Numeric(_) => EXIT_NUMERIC,
                Error::Incompatible(_) => EXIT_INCOMPATIBLE,
                _ => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}
