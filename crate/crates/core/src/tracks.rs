//! Sparse 3D trajectories, tracking-noise simulation and constant-velocity
//! Kalman / Rauch-Tung-Striebel smoothing.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Matrix2, RowVector2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};

/// Coordinate space of a [`TrackSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackSpace {
    /// Scene units `(x, y, z)`.
    World,
    /// Normalized `(u, v, d)`, as a tracker would report them.
    Normalized,
}

/// `T x N` trajectories with frame-0 pixel anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    frames: usize,
    points: usize,
    /// `positions[t * points + i]`
    positions: Vec<[f64; 3]>,
    /// Frame-0 pixel `(col, row)` of each track.
    anchor_uv: Vec<[u32; 2]>,
    object_id: Vec<u32>,
    space: TrackSpace,
}

impl TrackSet {
    pub fn new(
        frames: usize,
        points: usize,
        positions: Vec<[f64; 3]>,
        anchor_uv: Vec<[u32; 2]>,
        object_id: Vec<u32>,
        space: TrackSpace,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Param("track set needs at least one frame".into()));
        }
        if positions.len() != frames * points || anchor_uv.len() != points || object_id.len() != points {
            return Err(Error::Shape {
                left: alloc::vec![frames, points],
                right: alloc::vec![positions.len(), anchor_uv.len(), object_id.len()],
            });
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite track position".into()));
        }
        Ok(Self { frames, points, positions, anchor_uv, object_id, space })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }

    pub fn space(&self) -> TrackSpace {
        self.space
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> [f64; 3] {
        self.positions[t * self.points + i]
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn anchor_uv(&self) -> &[[u32; 2]] {
        &self.anchor_uv
    }

    pub fn object_id(&self) -> &[u32] {
        &self.object_id
    }

    fn with_positions(&self, positions: Vec<[f64; 3]>) -> Self {
        Self { positions, ..self.clone() }
    }

    /// Projects world-space tracks to normalized `(u, v, d)`.
    pub fn to_normalized(&self, cam: &CameraIntrinsics) -> Result<Self> {
        match self.space {
            TrackSpace::Normalized => Ok(self.clone()),
            TrackSpace::World => {
                let positions = self.positions.iter().map(|&p| cam.project(p)).collect::<Result<Vec<_>>>()?;
                Ok(Self { positions, space: TrackSpace::Normalized, ..self.clone() })
            }
        }
    }
}

/// Simulated tracker imprecision.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSpec {
    pub sigma: f64,
    pub outlier_prob: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { sigma: 0.0, outlier_prob: 0.0, outlier_scale: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.outlier_prob) || !(self.outlier_scale >= 0.0) {
            return Err(Error::Validation(format!("invalid noise spec {self:?}")));
        }
        Ok(())
    }
}

/// Adds i.i.d. Gaussian noise to every sample after frame 0. Outlier samples
/// (probability `outlier_prob` per point and frame) get an extra
/// `outlier_scale * sigma` Gaussian kick.
pub fn inject_noise(tracks: &TrackSet, spec: &NoiseSpec) -> Result<TrackSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = tracks.positions.clone();
    for t in 1..tracks.frames {
        for i in 0..tracks.points {
            let p = &mut out[t * tracks.points + i];
            for v in p.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += spec.sigma * n;
            }
            if rng.random::<f64>() < spec.outlier_prob {
                for v in p.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.outlier_scale * spec.sigma * n;
                }
            }
        }
    }
    TrackSet::new(tracks.frames, tracks.points, out, tracks.anchor_uv.clone(), tracks.object_id.clone(), tracks.space)
}

/// Constant-velocity filter noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KalmanSpec {
    /// Process (white acceleration) noise variance.
    pub process_var: f64,
    /// Measurement noise variance.
    pub measure_var: f64,
}

impl Default for KalmanSpec {
    fn default() -> Self {
        Self { process_var: 1e-4, measure_var: 1e-2 }
    }
}

impl KalmanSpec {
    pub fn validate(&self) -> Result<()> {
        if self.process_var > 0.0 && self.measure_var > 0.0 {
            Ok(())
        } else {
            Err(Error::Validation(format!("kalman variances must be positive: {self:?}")))
        }
    }
}

/// Prior variance of the unknown initial velocity.
const DIFFUSE_VELOCITY_VAR: f64 = 1e6;

/// Smooths one scalar series with a constant-velocity Kalman filter followed by
/// a Rauch-Tung-Striebel backward pass. Returns the smoothed positions.
pub fn smooth_series(z: &[f64], spec: &KalmanSpec) -> Vec<f64> {
    let n = z.len();
    if n < 2 {
        return z.to_vec();
    }
    let f = Matrix2::new(1.0, 1.0, 0.0, 1.0);
    let q = spec.process_var * Matrix2::new(1.0 / 3.0, 0.5, 0.5, 1.0);
    let h = RowVector2::new(1.0, 0.0);
    let r = spec.measure_var;

    let mut xf = Vec::with_capacity(n);
    let mut pf = Vec::with_capacity(n);
    let mut xp = Vec::with_capacity(n);
    let mut pp = Vec::with_capacity(n);

    // The first measurement fixes the position; velocity starts diffuse.
    let x0 = Vector2::new(z[0], 0.0);
    let p0 = Matrix2::new(r, 0.0, 0.0, DIFFUSE_VELOCITY_VAR);
    xf.push(x0);
    pf.push(p0);
    xp.push(x0);
    pp.push(p0);
    for &zt in &z[1..] {
        let x_pred = f * xf.last().unwrap();
        let p_pred = f * pf.last().unwrap() * f.transpose() + q;
        let s = (h * p_pred * h.transpose())[0] + r;
        let k = p_pred * h.transpose() / s;
        let innov = zt - (h * x_pred)[0];
        let x_new = x_pred + k * innov;
        let ikh = Matrix2::identity() - k * h;
        let p_new = ikh * p_pred * ikh.transpose() + k * r * k.transpose();
        xp.push(x_pred);
        pp.push(p_pred);
        xf.push(x_new);
        pf.push(p_new);
    }

    let mut xs = xf.clone();
    for t in (0..n - 1).rev() {
        let inv = pp[t + 1].try_inverse().unwrap_or_else(Matrix2::zeros);
        let g = pf[t] * f.transpose() * inv;
        xs[t] = xf[t] + g * (xs[t + 1] - xp[t + 1]);
    }
    xs.iter().map(|x| x[0]).collect()
}

/// Result of [`kalman_smooth`].
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub tracks: TrackSet,
    /// Set when the input was too short to smooth and was returned unchanged.
    pub skipped: bool,
}

/// Smooths every point and axis independently.
pub fn kalman_smooth(tracks: &TrackSet, spec: &KalmanSpec) -> Result<Smoothed> {
    spec.validate()?;
    if tracks.frames < 2 {
        return Ok(Smoothed { tracks: tracks.clone(), skipped: true });
    }
    let (frames, points) = (tracks.frames, tracks.points);
    let mut out = tracks.positions.clone();
    let mut series = Vec::with_capacity(frames);
    for i in 0..points {
        for axis in 0..3 {
            series.clear();
            series.extend((0..frames).map(|t| tracks.get(t, i)[axis]));
            for (t, v) in smooth_series(&series, spec).into_iter().enumerate() {
                out[t * points + i][axis] = v;
            }
        }
    }
    Ok(Smoothed { tracks: tracks.with_positions(out), skipped: false })
}
