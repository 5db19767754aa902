//! File formats, configuration and run drivers around [`hsam_core`].

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
mod bytes;
mod error;
pub mod log;
pub mod pgm;
pub mod report;
pub mod run;

pub use error::{Error, FormatError, Result};
pub use hsam_core as core;
