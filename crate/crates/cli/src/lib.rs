//! Experiment harness around `icreg-core`: configuration, file formats,
//! Monte Carlo experiments and the `icreg` command line.

pub mod app;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod stats;
