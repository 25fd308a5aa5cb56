//! File formats, configuration and command implementations around
//! `patchmerge-core`.

pub mod config;
pub mod error;
pub mod format;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::{Error, Result};
