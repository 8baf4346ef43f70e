//! Core of the point-augmented video diffusion lab.
//!
//! Everything here is pure computation over in-memory data and builds under
//! `no_std` with `alloc`. File formats, the dataset layout and the command line
//! live in the `pointvid` crate.
#![no_std]

extern crate alloc;

pub mod camera;
pub mod diffusion;
pub mod error;
pub mod geomreg;
pub mod kdtree;
pub mod pipeline;
pub mod pointgrid;
pub mod scene;
pub mod tensor;
pub mod tracks;
pub mod train;

pub use error::{Error, Result};
