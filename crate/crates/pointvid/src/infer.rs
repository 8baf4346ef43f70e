//! Unconditional-noise sampling from a joint checkpoint and artifact rendering.

use std::fs;
use std::path::{Path, PathBuf};

use pointvid_core::camera::CameraIntrinsics;
use pointvid_core::diffusion::denoiser::Conditioned;
use pointvid_core::diffusion::{sample_z0, Grid};
use pointvid_core::tensor::{slice_channels, to_diffusion, JointVideo, TensorF};
use pointvid_core::train::{draw_noise, item_rng};

use crate::checkpoint::load_checkpoint;
use crate::dataset::{SceneMeta, JOINT, SCENE};
use crate::error::{PvError, Result};
use crate::formats::{read_json, read_ppm, read_tensor, write_ply, write_ppm_frames, write_tensor};

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    /// Frame count when the checkpoint does not record its training grid.
    pub frames: Option<usize>,
}

/// Runs the reverse process from pure noise at the last schedule step,
/// conditioned on one RGB frame, and writes `<out>/joint.vpt`.
pub fn sample(ckpt: &Path, cond_path: &Path, out: &Path, o: &SampleOptions) -> Result<PathBuf> {
    if o.steps == 0 {
        return Err(PvError::Input("--steps must be positive".into()));
    }
    let ck = load_checkpoint(ckpt)?;
    if ck.params.config().in_channels != 6 {
        return Err(PvError::Staging(format!("{} is an RGB-only checkpoint; sampling needs a joint model", ckpt.display())));
    }
    let (w, h, rgb) = read_ppm(cond_path)?;
    let frames = match (ck.meta.grid, o.frames) {
        (Some([t, gh, gw]), f) => {
            if (gh, gw) != (h, w) {
                return Err(PvError::Input(format!(
                    "conditioning frame is {w}x{h} but the checkpoint was trained at {gw}x{gh}"
                )));
            }
            f.unwrap_or(t)
        }
        (None, f) => f.unwrap_or(8),
    };
    if frames < 2 {
        return Err(PvError::Input(format!("need at least 2 frames, got {frames}")));
    }
    let sched = ck.meta.train.as_ref().map(|c| c.schedule).unwrap_or_default().build()?;
    let grid = Grid { frames, height: h, width: w };
    let cond: Vec<f64> = rgb.iter().map(|&v| to_diffusion(v) as f64).collect();
    let p = ck.params.to_f64();
    let model = Conditioned::new(&ck.params, &p, grid, &cond);
    let z_t = draw_noise(&mut item_rng(o.seed, u64::MAX - 1, 0), grid.pixels() * 6);
    let z0 = sample_z0(&model, &z_t, sched.steps(), o.steps, &sched)?;
    let data = z0.iter().map(|&z| (((z + 1.0) * 0.5).clamp(0.0, 1.0)) as f32).collect();
    let joint = JointVideo::new(TensorF::new(vec![frames, h, w, 6], data)?)?;
    fs::create_dir_all(out).map_err(|e| PvError::io(out, e))?;
    let path = out.join(JOINT);
    write_tensor(joint.tensor(), &path)?;
    Ok(path)
}

pub const DEFAULT_MIN_DEPTH: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub frames: Vec<PathBuf>,
    pub clouds: Vec<PathBuf>,
    pub points_per_frame: usize,
}

/// Camera for a joint video: an explicit `scene.json`, else one next to the
/// input, else the generator default for the resolution.
pub fn render_camera(input: &Path, scene: Option<&Path>, width: usize, height: usize) -> Result<CameraIntrinsics> {
    let sibling = input.parent().map(|d| d.join(SCENE)).filter(|p| p.is_file());
    let cam = match scene.map(Path::to_path_buf).or(sibling) {
        Some(p) => read_json::<SceneMeta>(&p)?.spec.camera,
        None => CameraIntrinsics::for_size(width, height),
    };
    if (cam.width, cam.height) != (width, height) {
        return Err(PvError::Input(format!(
            "camera is {}x{} but the video is {width}x{height}",
            cam.width, cam.height
        )));
    }
    Ok(cam)
}

fn depth_color(d: f64, lo: f64, hi: f64) -> [u8; 3] {
    let s = if hi > lo { ((d - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    [(255.0 * (1.0 - s)).round() as u8, 64, (255.0 * s).round() as u8]
}

/// PPM frames of the RGB channels and one PLY per frame holding the points of
/// every pixel whose frame-0 depth exceeds `min_depth`, colored near (red) to far (blue).
pub fn render(input: &Path, out: &Path, scene: Option<&Path>, min_depth: f64) -> Result<RenderOutput> {
    let (dims, mut data) = read_tensor(input)?.into_parts();
    // Sampled colors may overshoot slightly; clamp for display.
    for px in data.chunks_mut(6) {
        for v in px.iter_mut().take(3) {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let joint = JointVideo::new(TensorF::new(dims, data)?)?;
    let (t, h, w) = (joint.frames(), joint.height(), joint.width());
    let cam = render_camera(input, scene, w, h)?;
    let (rgb, grid) = slice_channels(&joint)?;
    fs::create_dir_all(out).map_err(|e| PvError::io(out, e))?;
    let frames = write_ppm_frames(&rgb, out)?;

    let fg: Vec<(usize, usize)> =
        (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| grid.pixel(0, r, c)[2] as f64 > min_depth).collect();
    let d0: Vec<f64> = fg.iter().map(|&(r, c)| grid.pixel(0, r, c)[2] as f64).collect();
    let lo = d0.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let colors: Vec<[u8; 3]> = d0.iter().map(|&d| depth_color(d, lo, hi)).collect();
    let mut clouds = Vec::with_capacity(t);
    for ti in 0..t {
        let pts: Vec<[f64; 3]> = fg
            .iter()
            .map(|&(r, c)| {
                let q = grid.pixel(ti, r, c);
                cam.unproject([q[0] as f64, q[1] as f64, q[2] as f64])
            })
            .collect();
        let path = out.join(format!("points_{ti:03}.ply"));
        write_ply(&pts, Some(&colors), &path)?;
        clouds.push(path);
    }
    Ok(RenderOutput { frames, clouds, points_per_frame: fg.len() })
}
