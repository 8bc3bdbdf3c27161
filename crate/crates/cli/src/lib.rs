//! Command-line pipeline around the place-recognition model: run
//! configuration, binary tensor and checkpoint files, and one function per
//! pipeline stage so every command is callable from code.

pub mod commands;
pub mod config;
pub mod formats;

pub use config::{Precision, Preset, RunConfig};

use vpr_core::{Error, ErrorKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}
