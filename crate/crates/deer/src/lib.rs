//! File formats, reports and the command-line pipeline around
//! [`deer_core`].
//!
//! - [`jsonl`]: the KB and documents JSON Lines formats.
//! - [`formats`]: vocabulary, model and index binaries; alias table file.
//! - [`config`]: the `key=value` run configuration.
//! - [`report`]: training, mining, benchmark and comparison outputs.
//! - [`bench`]: timed evaluation and latency measurement.
//! - [`cli`]: the `deer` subcommands.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod jsonl;
pub mod report;

pub use error::{Error, Result};
