//! Rigid-body scene simulation, flat-shaded rasterization and ground-truth
//! track extraction.
//!
//! Bodies fall under gravity onto a horizontal ground plane; there is no
//! body-body contact. The camera is static (see [`crate::camera`]).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::tensor::{ForegroundMask, RgbVideo, TensorF};
use crate::tracks::{TrackSet, TrackSpace};

/// Color of pixels not covered by any body.
pub const BACKGROUND_GRAY: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind"))]
pub enum Shape {
    Box { half_extents: [f64; 3] },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Body {
    pub shape: Shape,
    pub albedo: [f32; 3],
    pub position: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub orientation: [f64; 4],
    pub velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub bodies: Vec<Body>,
    pub gravity: [f64; 3],
    pub ground_height: f64,
    pub restitution: f64,
    pub frames: usize,
    pub dt: f64,
    pub camera: CameraIntrinsics,
    pub seed: u64,
}

/// Pose and velocities of one body at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl BodyState {
    fn from_body(b: &Body) -> Self {
        let [w, x, y, z] = b.orientation;
        Self {
            position: Vector3::from(b.position),
            orientation: UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
            velocity: Vector3::from(b.velocity),
            angular_velocity: Vector3::from(b.angular_velocity),
        }
    }

    /// Maps a body-local point to world coordinates.
    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * local + self.position
    }

    pub fn to_local(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * (world - self.position)
    }
}

/// `states[frame][body]`.
pub type Trajectory = Vec<Vec<BodyState>>;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Validation(format!("need at least 2 frames, got {}", self.frames)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Validation(format!("dt must be positive, got {}", self.dt)));
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(Error::Validation(format!("restitution {} outside [0,1]", self.restitution)));
        }
        self.camera.validate()?;
        for (i, b) in self.bodies.iter().enumerate() {
            let n = libm::sqrt(b.orientation.iter().map(|q| q * q).sum::<f64>());
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("body {i}: quaternion norm {n} is not 1")));
            }
            let size_ok = match b.shape {
                Shape::Box { half_extents } => half_extents.iter().all(|&e| e > 0.0),
                Shape::Sphere { radius } => radius > 0.0,
            };
            if !size_ok {
                return Err(Error::Validation(format!("body {i}: non-positive size")));
            }
            if b.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Validation(format!("body {i}: albedo outside [0,1]")));
            }
        }
        Ok(())
    }
}

fn lowest_point(shape: &Shape, s: &BodyState) -> f64 {
    match *shape {
        Shape::Sphere { radius } => s.position.y - radius,
        Shape::Box { half_extents: [hx, hy, hz] } => {
            let mut low = f64::INFINITY;
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        let c = s.to_world(&Vector3::new(sx * hx, sy * hy, sz * hz));
                        low = low.min(c.y);
                    }
                }
            }
            low
        }
    }
}

/// Pushes a penetrating body back onto the ground and reflects its downward
/// velocity scaled by `restitution`. Returns whether contact occurred.
pub fn resolve_ground_contact(shape: &Shape, s: &mut BodyState, ground: f64, restitution: f64) -> bool {
    let low = lowest_point(shape, s);
    if low >= ground {
        return false;
    }
    s.position.y += ground - low;
    if s.velocity.y < 0.0 {
        s.velocity.y = -restitution * s.velocity.y;
    }
    true
}

/// One semi-implicit Euler step: velocity first, then position and orientation
/// from the updated velocities, then ground contact.
pub fn step_body(shape: &Shape, s: &mut BodyState, spec: &SceneSpec) {
    let g = Vector3::from(spec.gravity);
    s.velocity += g * spec.dt;
    s.position += s.velocity * spec.dt;
    let spin = UnitQuaternion::from_scaled_axis(s.angular_velocity * spec.dt);
    s.orientation = UnitQuaternion::new_normalize(*(spin * s.orientation).quaternion());
    resolve_ground_contact(shape, s, spec.ground_height, spec.restitution);
}

/// Integrates the scene; frame 0 is the initial state.
pub fn simulate(spec: &SceneSpec) -> Result<Trajectory> {
    spec.validate()?;
    let mut states: Trajectory = Vec::with_capacity(spec.frames);
    states.push(spec.bodies.iter().map(BodyState::from_body).collect());
    for t in 1..spec.frames {
        let mut next = states[t - 1].clone();
        for (b, s) in spec.bodies.iter().zip(next.iter_mut()) {
            step_body(&b.shape, s, spec);
        }
        states.push(next);
    }
    Ok(states)
}

/// Depth and body index of the nearest surface under every pixel of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRaster {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub body: Vec<Option<usize>>,
}

fn ray_hit(shape: &Shape, s: &BodyState, dir: &Vector3<f64>, near: f64) -> Option<f64> {
    match *shape {
        Shape::Sphere { radius } => {
            let c = s.position;
            let a = dir.dot(dir);
            let b = dir.dot(&c);
            let disc = b * b - a * (c.dot(&c) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let sq = libm::sqrt(disc);
            [(b - sq) / a, (b + sq) / a].into_iter().find(|&t| t > near)
        }
        Shape::Box { half_extents } => {
            let inv = s.orientation.inverse();
            let o = inv * (-s.position);
            let d = inv * dir;
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for k in 0..3 {
                let e = half_extents[k];
                if d[k].abs() < 1e-15 {
                    if o[k] < -e || o[k] > e {
                        return None;
                    }
                } else {
                    let ta = (-e - o[k]) / d[k];
                    let tb = (e - o[k]) / d[k];
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
            }
            if t0 > t1 {
                return None;
            }
            [t0, t1].into_iter().find(|&t| t > near)
        }
    }
}

/// Z-buffered visibility of all bodies for one frame. Ties keep the lower body index.
pub fn rasterize(spec: &SceneSpec, frame: &[BodyState]) -> FrameRaster {
    let cam = &spec.camera;
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut body = vec![None; w * h];
    for r in 0..h {
        for c in 0..w {
            let dir = Vector3::from(cam.ray(c as f64, r as f64));
            let i = r * w + c;
            for (bi, (b, s)) in spec.bodies.iter().zip(frame).enumerate() {
                if let Some(t) = ray_hit(&b.shape, s, &dir, cam.near) {
                    if t < depth[i] {
                        depth[i] = t;
                        body[i] = Some(bi);
                    }
                }
            }
        }
    }
    FrameRaster { width: w, height: h, depth, body }
}

impl FrameRaster {
    pub fn mask(&self) -> ForegroundMask {
        ForegroundMask::new(self.height, self.width, self.body.iter().map(Option::is_some).collect())
            .expect("raster dims are consistent")
    }
}

/// Rendered video plus the per-frame coverage masks. The dataset mask is `masks[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub video: RgbVideo,
    pub masks: Vec<ForegroundMask>,
}

pub fn render(spec: &SceneSpec, states: &Trajectory) -> Result<Rendering> {
    let cam = &spec.camera;
    let (w, h) = (cam.width, cam.height);
    let mut data = Vec::with_capacity(states.len() * w * h * 3);
    let mut masks = Vec::with_capacity(states.len());
    for frame in states {
        let raster = rasterize(spec, frame);
        for b in &raster.body {
            match b {
                Some(bi) => data.extend_from_slice(&spec.bodies[*bi].albedo),
                None => data.extend_from_slice(&[BACKGROUND_GRAY; 3]),
            }
        }
        masks.push(raster.mask());
    }
    let video = RgbVideo::new(TensorF::new(vec![states.len(), h, w, 3], data)?)?;
    Ok(Rendering { video, masks })
}

/// Samples frame-0 foreground pixels on a `stride x stride` grid and carries
/// each attached surface point rigidly with its body through every frame.
pub fn extract_tracks(spec: &SceneSpec, states: &Trajectory, stride: usize) -> Result<TrackSet> {
    if stride == 0 {
        return Err(Error::Param("stride must be positive".into()));
    }
    let cam = &spec.camera;
    let raster = rasterize(spec, &states[0]);
    let mut locals = Vec::new();
    let mut anchors = Vec::new();
    let mut ids = Vec::new();
    for r in (0..cam.height).step_by(stride) {
        for c in (0..cam.width).step_by(stride) {
            let i = r * cam.width + c;
            if let Some(bi) = raster.body[i] {
                let world = Vector3::from(cam.unproject_pixel(c as f64, r as f64, raster.depth[i]));
                locals.push((bi, states[0][bi].to_local(&world)));
                anchors.push([c as u32, r as u32]);
                ids.push(bi as u32);
            }
        }
    }
    let n = locals.len();
    let frames = states.len();
    let mut world = Vec::with_capacity(frames * n);
    for frame in states {
        for (bi, local) in &locals {
            let p = frame[*bi].to_world(local);
            world.push([p.x, p.y, p.z]);
        }
    }
    TrackSet::new(frames, n, world, anchors, ids, TrackSpace::World)
}

/// Draws a random falling-objects scene with one to three bodies.
pub fn random_scene(seed: u64, frames: usize, width: usize, height: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=3);
    let bodies = (0..count)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                Shape::Sphere { radius: rng.random_range(0.4..0.7) }
            } else {
                Shape::Box {
                    half_extents: [
                        rng.random_range(0.3..0.6),
                        rng.random_range(0.3..0.6),
                        rng.random_range(0.3..0.6),
                    ],
                }
            };
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let angle = rng.random_range(0.0..core::f64::consts::PI);
            let q = match nalgebra::Unit::try_new(axis, 1e-6) {
                Some(a) => UnitQuaternion::from_axis_angle(&a, angle),
                None => UnitQuaternion::identity(),
            };
            Body {
                shape,
                albedo: [
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                ],
                position: [
                    rng.random_range(-1.2..1.2),
                    rng.random_range(-0.4..1.0),
                    rng.random_range(5.0..7.0),
                ],
                orientation: [q.w, q.i, q.j, q.k],
                velocity: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..1.0),
                    rng.random_range(-0.5..0.5),
                ],
                angular_velocity: [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ],
            }
        })
        .collect();
    SceneSpec {
        bodies,
        gravity: [0.0, -9.81, 0.0],
        ground_height: -1.2,
        restitution: rng.random_range(0.3..0.7),
        frames,
        dt: 0.06,
        camera: CameraIntrinsics::for_size(width, height),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(pos: [f64; 3], r: f64, albedo: [f32; 3]) -> Body {
        Body {
            shape: Shape::Sphere { radius: r },
            albedo,
            position: pos,
            orientation: [1.0, 0.0, 0.0, 0.0],
            velocity: [0.0; 3],
            angular_velocity: [0.0; 3],
        }
    }

    fn cube(pos: [f64; 3], half: f64, albedo: [f32; 3]) -> Body {
        Body { shape: Shape::Box { half_extents: [half; 3] }, ..sphere(pos, 1.0, albedo) }
    }

    fn spec(bodies: Vec<Body>, gravity: [f64; 3]) -> SceneSpec {
        SceneSpec {
            bodies,
            gravity,
            ground_height: -100.0,
            restitution: 0.5,
            frames: 4,
            dt: 0.1,
            camera: CameraIntrinsics::for_size(32, 32),
            seed: 0,
        }
    }

    #[test]
    fn static_scene_stays_put() {
        let s = spec(vec![sphere([0.0, 0.0, 6.0], 0.5, [1.0, 0.0, 0.0])], [0.0; 3]);
        let st = simulate(&s).unwrap();
        for f in &st {
            assert_eq!(f, &st[0]);
        }
    }

    #[test]
    fn free_fall_is_semi_implicit() {
        let y0 = 3.0;
        let s = spec(vec![sphere([0.0, y0, 6.0], 0.5, [1.0; 3])], [0.0, -10.0, 0.0]);
        let st = simulate(&s).unwrap();
        assert!((st[3][0].position.y - (y0 - 0.6)).abs() < 1e-12);
    }

    #[test]
    fn elastic_bounce_preserves_speed() {
        let shape = Shape::Sphere { radius: 0.5 };
        let mut s = BodyState::from_body(&sphere([0.0, -0.6, 6.0], 0.5, [1.0; 3]));
        s.velocity = Vector3::new(0.0, -4.25, 0.0);
        let before = s.velocity.norm();
        assert!(resolve_ground_contact(&shape, &mut s, -1.0, 1.0));
        assert!((s.velocity.norm() - before).abs() < 1e-6);
        assert!(s.velocity.y > 0.0);
        assert!((s.position.y - (-0.5)).abs() < 1e-12);

        // Dropped from rest: the speed just before and just after each bounce agree.
        let mut sp = spec(vec![sphere([0.0, 0.5, 6.0], 0.5, [1.0; 3])], [0.0, -10.0, 0.0]);
        sp.restitution = 1.0;
        sp.ground_height = -1.0;
        let mut st = BodyState::from_body(&sp.bodies[0]);
        let mut bounced = false;
        for _ in 0..40 {
            st.velocity += Vector3::from(sp.gravity) * sp.dt;
            st.position += st.velocity * sp.dt;
            let pre = st.velocity.norm();
            if resolve_ground_contact(&shape, &mut st, sp.ground_height, sp.restitution) {
                assert!((st.velocity.norm() - pre).abs() < 1e-6);
                bounced = true;
            }
        }
        assert!(bounced);
    }

    #[test]
    fn validation_errors() {
        let mut s = spec(vec![sphere([0.0, 0.0, 6.0], 0.5, [1.0; 3])], [0.0; 3]);
        s.bodies[0].orientation = [1.0, 0.1, 0.0, 0.0];
        assert!(matches!(simulate(&s), Err(Error::Validation(_))));
        let mut s = spec(vec![], [0.0; 3]);
        s.dt = 0.0;
        assert!(simulate(&s).is_err());
        let mut s = spec(vec![], [0.0; 3]);
        s.frames = 1;
        assert!(simulate(&s).is_err());
    }

    #[test]
    fn empty_scene_renders_gray() {
        let s = spec(vec![], [0.0; 3]);
        let r = render(&s, &simulate(&s).unwrap()).unwrap();
        assert!(r.video.tensor().data().iter().all(|&v| v == BACKGROUND_GRAY));
        assert!(r.masks.iter().all(ForegroundMask::is_empty));
    }

    #[test]
    fn centered_sphere_is_a_disc() {
        let s = spec(vec![sphere([0.0, 0.0, 6.0], 1.0, [1.0, 0.0, 0.0])], [0.0; 3]);
        let r = render(&s, &simulate(&s).unwrap()).unwrap();
        let m = &r.masks[0];
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
        for (row, col) in m.pixels() {
            sr += row as f64;
            sc += col as f64;
            n += 1.0;
        }
        let c = s.camera.project_pixel([0.0, 0.0, 6.0]).unwrap();
        assert!((sc / n - c[0]).abs() < 1.0 && (sr / n - c[1]).abs() < 1.0);
        // Every covered pixel's ray passes within the radius; every uncovered one misses.
        for row in 0..32 {
            for col in 0..32 {
                let d = Vector3::from(s.camera.ray(col as f64, row as f64));
                let center = Vector3::new(0.0, 0.0, 6.0);
                let dist = (center - d * (center.dot(&d) / d.dot(&d))).norm();
                assert_eq!(m.get(row, col), dist <= 1.0, "pixel ({row},{col})");
            }
        }
    }

    #[test]
    fn nearer_box_wins_overlap() {
        let near = cube([0.0, 0.0, 5.0], 0.5, [1.0, 0.0, 0.0]);
        let far = cube([0.3, 0.0, 7.0], 1.0, [0.0, 0.0, 1.0]);
        let s = spec(vec![far, near], [0.0; 3]);
        let states = simulate(&s).unwrap();
        let r = render(&s, &states).unwrap();
        let raster = rasterize(&s, &states[0]);
        let mut overlap = 0;
        for row in 0..32 {
            for col in 0..32 {
                let d = Vector3::from(s.camera.ray(col as f64, row as f64));
                let hits: Vec<_> = s
                    .bodies
                    .iter()
                    .zip(&states[0])
                    .map(|(b, st)| ray_hit(&b.shape, st, &d, s.camera.near))
                    .collect();
                if let (Some(a), Some(b)) = (hits[0], hits[1]) {
                    overlap += 1;
                    assert!(b < a);
                    assert_eq!(raster.body[row * 32 + col], Some(1));
                    assert_eq!(r.video.pixel(0, row, col), &[1.0, 0.0, 0.0]);
                }
            }
        }
        assert!(overlap > 0);
    }

    #[test]
    fn tracks_follow_translation() {
        let mut b = cube([0.0, 0.0, 6.0], 0.8, [0.2, 0.4, 0.6]);
        b.velocity = [0.5, 0.1, 0.2];
        let s = spec(vec![b], [0.0; 3]);
        let states = simulate(&s).unwrap();
        let tr = extract_tracks(&s, &states, 4).unwrap();
        assert!(tr.points() > 0);
        let delta = [0.05, 0.01, 0.02];
        for i in 0..tr.points() {
            let p0 = tr.get(0, i);
            for t in 0..s.frames {
                let p = tr.get(t, i);
                for k in 0..3 {
                    assert!((p[k] - (p0[k] + t as f64 * delta[k])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn anchors_project_back_and_lie_in_mask() {
        let s = random_scene(11, 6, 32, 32);
        let states = simulate(&s).unwrap();
        let r = render(&s, &states).unwrap();
        let tr = extract_tracks(&s, &states, 3).unwrap();
        for i in 0..tr.points() {
            let [c, row] = tr.anchor_uv()[i];
            assert!(r.masks[0].get(row as usize, c as usize));
            let p = s.camera.project_pixel(tr.get(0, i)).unwrap();
            assert!((p[0] - c as f64).abs() < 0.5 && (p[1] - row as f64).abs() < 0.5);
        }
    }

    #[test]
    fn ground_truth_is_rigid() {
        let s = random_scene(5, 8, 32, 32);
        let states = simulate(&s).unwrap();
        let tr = extract_tracks(&s, &states, 2).unwrap();
        let dist = |a: [f64; 3], b: [f64; 3]| {
            libm::sqrt((0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>())
        };
        for i in 0..tr.points() {
            for j in (i + 1)..tr.points() {
                if tr.object_id()[i] != tr.object_id()[j] {
                    continue;
                }
                let d0 = dist(tr.get(0, i), tr.get(0, j));
                for t in 1..s.frames {
                    assert!((dist(tr.get(t, i), tr.get(t, j)) - d0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn wide_stride_samples_once_per_band() {
        let s = random_scene(2, 3, 16, 16);
        let states = simulate(&s).unwrap();
        let tr = extract_tracks(&s, &states, 16).unwrap();
        assert!(tr.points() <= 1);
    }

    #[test]
    fn deterministic_generation() {
        let a = random_scene(9, 8, 32, 32);
        let b = random_scene(9, 8, 32, 32);
        assert_eq!(a, b);
        let ra = render(&a, &simulate(&a).unwrap()).unwrap();
        let rb = render(&b, &simulate(&b).unwrap()).unwrap();
        assert_eq!(ra, rb);
    }
}
