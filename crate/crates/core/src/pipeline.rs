//! Scene synthesis and track post-processing wired end to end.

use crate::camera::CameraIntrinsics;
use crate::error::Result;
use crate::pointgrid::{build_point_grid, GridBuild, DEFAULT_KNN};
use crate::scene::{extract_tracks, random_scene, render, simulate, SceneSpec};
use crate::tensor::{concat_vp, ForegroundMask, JointVideo, RgbVideo};
use crate::tracks::{inject_noise, kalman_smooth, KalmanSpec, NoiseSpec, TrackSet};

/// One synthetic scene with its oracle tracks (world space) and frame-0 mask.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub spec: SceneSpec,
    pub video: RgbVideo,
    pub mask: ForegroundMask,
    pub tracks: TrackSet,
}

pub fn generate_from_spec(spec: SceneSpec, stride: usize) -> Result<GeneratedScene> {
    spec.validate()?;
    let states = simulate(&spec)?;
    let rendering = render(&spec, &states)?;
    let tracks = extract_tracks(&spec, &states, stride)?;
    let mask = rendering.masks.into_iter().next().expect("at least one frame");
    Ok(GeneratedScene { spec, video: rendering.video, mask, tracks })
}

pub fn generate_scene(seed: u64, frames: usize, width: usize, height: usize, stride: usize) -> Result<GeneratedScene> {
    generate_from_spec(random_scene(seed, frames, width, height), stride)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepSettings {
    pub noise: NoiseSpec,
    /// `None` skips smoothing.
    pub kalman: Option<KalmanSpec>,
    pub knn: usize,
}

impl Default for PrepSettings {
    fn default() -> Self {
        Self { noise: NoiseSpec::none(), kalman: Some(KalmanSpec::default()), knn: DEFAULT_KNN }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub build: GridBuild,
    pub joint: JointVideo,
    /// Tracks after noise and smoothing, in normalized space.
    pub tracks: TrackSet,
}

/// Project, perturb, smooth, then pack into the pixel-aligned grid.
pub fn prepare(
    video: &RgbVideo,
    tracks: &TrackSet,
    mask: &ForegroundMask,
    cam: &CameraIntrinsics,
    s: &PrepSettings,
) -> Result<Prepared> {
    let normalized = tracks.to_normalized(cam)?;
    let noisy = inject_noise(&normalized, &s.noise)?;
    let smoothed = match &s.kalman {
        Some(k) => kalman_smooth(&noisy, k)?.tracks,
        None => noisy,
    };
    let build = build_point_grid(&smoothed, mask, cam, video.height(), video.width(), s.knn)?;
    let joint = concat_vp(video, &build.grid)?;
    Ok(Prepared { build, joint, tracks: smoothed })
}
