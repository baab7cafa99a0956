//! Training, evaluation, file formats and command line for the TRUSWorthy
//! prostate-cancer detection pipeline.
//!
//! The numerical core (phantom data, ROI extraction, splits, the VICReg
//! objective, ensemble arithmetic, metrics and heatmaps) lives in
//! `trusworthy-core`; this crate adds the networks on a candle backend, the
//! training loops, on-disk formats and the `trusworthy` binary.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod manifest;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use pipeline::Run;
