//! Toy pixel-space DDIM diffusion over RGB and joint RGB + point videos.

pub mod ddim;
pub mod denoiser;
pub mod layout;
pub mod nn;
pub mod schedule;

pub use ddim::{add_noise, ddim_step, diff_loss, sample_z0, sub_schedule, EpsModel, OracleEps};
pub use denoiser::{augment_channels, DenoiserConfig, DenoiserParams};
pub use layout::{LayerSpec, Layout};
pub use nn::Grid;
pub use schedule::{make_schedule, NoiseSchedule};
