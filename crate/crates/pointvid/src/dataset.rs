//! Dataset directory layout.
//!
//! ```text
//! <root>/scene_0000/video.vpt     [T, H, W, 3] RGB in [0, 1]
//!                   tracks.vpt    [T, N, 3] world-space oracle tracks
//!                   mask.vpt      [H, W] frame-0 foreground, 0 or 1
//!                   scene.json    SceneMeta
//! after prep:       pointgrid.vpt [T, H, W, 3] normalized (u, v, d)
//!                   joint.vpt     [T, H, W, 6]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pointvid_core::camera::CameraIntrinsics;
use pointvid_core::pipeline::{generate_scene, prepare, GeneratedScene, PrepSettings};
use pointvid_core::scene::SceneSpec;
use pointvid_core::tensor::{ForegroundMask, JointVideo, RgbVideo, TensorF};
use pointvid_core::tracks::{TrackSet, TrackSpace};
use pointvid_core::train::TrainSample;

use crate::error::{PvError, Result};
use crate::formats::{read_json, read_tensor, write_json, write_tensor};

pub const VIDEO: &str = "video.vpt";
pub const TRACKS: &str = "tracks.vpt";
pub const MASK: &str = "mask.vpt";
pub const SCENE: &str = "scene.json";
pub const POINTGRID: &str = "pointgrid.vpt";
pub const JOINT: &str = "joint.vpt";

/// Contents of `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub spec: SceneSpec,
    pub stride: usize,
    /// Redraws needed before the scene had at least one track.
    pub attempt: u32,
    /// Frame-0 pixel `[col, row]` of each track.
    pub anchor_uv: Vec<[u32; 2]>,
    pub object_id: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub scenes: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub seed: u64,
}

/// Stateless 64-bit mixer used to derive per-scene seeds.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

/// Scene directories under `root`, sorted by name.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(root).map_err(|e| PvError::io(root, e))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("scene_")))
        .collect();
    out.sort();
    Ok(out)
}

fn run_jobs<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PvError::Input(format!("thread pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| (0..n).into_par_iter().map(&f).collect());
    results.into_iter().collect()
}

/// Draws scene `index`, redrawing until it has at least one track.
pub fn draw_scene(opts: &GenOptions, index: usize) -> Result<(GeneratedScene, u32)> {
    const MAX_ATTEMPTS: u32 = 64;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = mix_seed(mix_seed(opts.seed, index as u64), attempt as u64);
        let g = generate_scene(seed, opts.frames, opts.width, opts.height, opts.stride)?;
        if !g.tracks.is_empty() {
            return Ok((g, attempt));
        }
    }
    Err(PvError::Pipeline(format!("scene {index}: no trackable object after {MAX_ATTEMPTS} draws")))
}

pub fn write_scene(dir: &Path, g: &GeneratedScene, stride: usize, attempt: u32) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PvError::io(dir, e))?;
    write_tensor(g.video.tensor(), &dir.join(VIDEO))?;
    let n = g.tracks.points();
    let data = g.tracks.positions().iter().flat_map(|p| p.map(|v| v as f32)).collect();
    write_tensor(&TensorF::new(vec![g.tracks.frames(), n, 3], data)?, &dir.join(TRACKS))?;
    write_tensor(&g.mask.to_tensor(), &dir.join(MASK))?;
    let meta = SceneMeta {
        spec: g.spec.clone(),
        stride,
        attempt,
        anchor_uv: g.tracks.anchor_uv().to_vec(),
        object_id: g.tracks.object_id().to_vec(),
    };
    write_json(&meta, &dir.join(SCENE))
}

pub fn validate_gen(opts: &GenOptions) -> Result<()> {
    if opts.scenes == 0 || opts.width == 0 || opts.height == 0 || opts.stride == 0 {
        return Err(PvError::Input("scenes, size and stride must be positive".into()));
    }
    if opts.frames < 2 {
        return Err(PvError::Input(format!("--frames must be at least 2, got {}", opts.frames)));
    }
    Ok(())
}

pub fn gen_data(opts: &GenOptions, out: &Path, jobs: usize) -> Result<Vec<PathBuf>> {
    validate_gen(opts)?;
    fs::create_dir_all(out).map_err(|e| PvError::io(out, e))?;
    run_jobs(jobs, opts.scenes, |i| {
        let (g, attempt) = draw_scene(opts, i)?;
        let dir = scene_dir(out, i);
        write_scene(&dir, &g, opts.stride, attempt)?;
        Ok(dir)
    })
}

fn need(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(PvError::Input(format!("missing input {}", path.display())))
    }
}

/// Raw scene inputs as written by `gen-data`.
pub struct SceneFiles {
    pub meta: SceneMeta,
    pub video: RgbVideo,
    pub mask: ForegroundMask,
    pub tracks: TrackSet,
}

pub fn read_scene(dir: &Path) -> Result<SceneFiles> {
    let meta: SceneMeta = read_json(&need(dir.join(SCENE))?)?;
    let video = RgbVideo::new(read_tensor(&need(dir.join(VIDEO))?)?)?;
    let mask = ForegroundMask::from_tensor(&read_tensor(&need(dir.join(MASK))?)?)?;
    let tt = read_tensor(&need(dir.join(TRACKS))?)?;
    let d = tt.dims();
    if d.len() != 3 || d[2] != 3 || d[1] != meta.anchor_uv.len() || meta.object_id.len() != d[1] {
        return Err(PvError::Input(format!(
            "{}: tracks {:?} do not match {} anchors",
            dir.display(),
            d,
            meta.anchor_uv.len()
        )));
    }
    let positions = tt.data().chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
    let tracks = TrackSet::new(d[0], d[1], positions, meta.anchor_uv.clone(), meta.object_id.clone(), TrackSpace::World)?;
    Ok(SceneFiles { meta, video, mask, tracks })
}

pub fn prep_scene(dir: &Path, out_dir: &Path, settings: &PrepSettings) -> Result<()> {
    let s = read_scene(dir)?;
    let prepared = prepare(&s.video, &s.tracks, &s.mask, &s.meta.spec.camera, settings).map_err(|e| match e {
        pointvid_core::Error::Pipeline(m) => PvError::Pipeline(format!("{}: {m}", dir.display())),
        other => other.into(),
    })?;
    fs::create_dir_all(out_dir).map_err(|e| PvError::io(out_dir, e))?;
    write_tensor(prepared.build.grid.tensor(), &out_dir.join(POINTGRID))?;
    write_tensor(prepared.joint.tensor(), &out_dir.join(JOINT))?;
    if out_dir != dir {
        for name in [MASK, SCENE] {
            let (from, to) = (dir.join(name), out_dir.join(name));
            fs::copy(&from, &to).map_err(|e| PvError::io(&to, e))?;
        }
    }
    Ok(())
}

/// Prepares every scene. The noise seed of scene `i` is derived from
/// `settings.noise.seed` and `i`.
pub fn prep_all(input: &Path, out: &Path, settings: &PrepSettings, jobs: usize) -> Result<usize> {
    if !input.is_dir() {
        return Err(PvError::Input(format!("input directory {} not found", input.display())));
    }
    let scenes = list_scenes(input)?;
    if scenes.is_empty() {
        return Err(PvError::Input(format!("no scene_* directories in {}", input.display())));
    }
    run_jobs(jobs, scenes.len(), |i| {
        let dir = &scenes[i];
        let mut s = *settings;
        s.noise.seed = mix_seed(settings.noise.seed, i as u64);
        prep_scene(dir, &out.join(dir.file_name().expect("scene dir name")), &s)
    })?;
    Ok(scenes.len())
}

/// One prepared scene loaded for training or evaluation.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub name: String,
    pub sample: TrainSample,
}

pub fn read_prepared(dir: &Path) -> Result<(JointVideo, ForegroundMask, CameraIntrinsics)> {
    let meta: SceneMeta = read_json(&need(dir.join(SCENE))?)?;
    let joint = JointVideo::new(read_tensor(&need(dir.join(JOINT))?)?)?;
    let mask = ForegroundMask::from_tensor(&read_tensor(&need(dir.join(MASK))?)?)?;
    Ok((joint, mask, meta.spec.camera))
}

pub fn load_prepared(root: &Path, channels: usize) -> Result<Vec<LoadedScene>> {
    if !root.is_dir() {
        return Err(PvError::Input(format!("dataset directory {} not found", root.display())));
    }
    let scenes = list_scenes(root)?;
    if scenes.is_empty() {
        return Err(PvError::Input(format!("no scene_* directories in {}", root.display())));
    }
    scenes
        .iter()
        .map(|dir| {
            let (joint, mask, cam) = read_prepared(dir)?;
            let sample = TrainSample::from_joint(&joint, &mask, cam, channels)?;
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            Ok(LoadedScene { name, sample })
        })
        .collect()
}
