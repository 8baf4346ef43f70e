//! File formats, dataset layout, training driver and command line built on
//! `pointvid-core`.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod infer;
pub mod manifest;
pub mod training;

pub use error::{PvError, Result};
