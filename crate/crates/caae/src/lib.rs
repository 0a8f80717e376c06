//! File formats, run directories and the command-line front end for the age
//! progression model in `caae-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod manifest;
pub mod run;

pub use error::{Error, Result};
