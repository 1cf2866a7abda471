//! File formats, run configuration, reports and the command line for
//! `gdcan-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod report;
