//! Command-line front end: `prepare`, `train`, `evaluate`, `report` and
//! `synth`, driven by one configuration file.
//!
//! Exit codes: 0 success, 1 unexpected runtime failure (I/O, decoding),
//! 2 usage or configuration error, 3 dataset verification failure with
//! `--strict`, 4 non-finite loss during training.

pub mod commands;
pub mod config;

pub use commands::run;
pub use config::RunConfig;
