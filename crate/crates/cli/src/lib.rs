//! Command-line surface for clusternet: training runs, ablations, text
//! generation, gradient checks and structure exports.

pub mod cli;
pub mod error;
pub mod export;
pub mod generate;
pub mod gradcheck;
pub mod run;

pub use error::{CliError, CliResult};
