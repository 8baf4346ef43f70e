//! Pinhole camera with a y-up world frame.
//!
//! The camera sits at the origin looking down `+z`. Pixel `(row, col)` has its
//! center at image coordinates `(u, v) = (col, row)`, so
//! `u = cx + fx * x / z` and `v = cy - fy * y / z`.
//! Normalized coordinates divide `u` by the width, `v` by the height and the
//! depth `z` by the far plane.

use alloc::format;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

/// Normalized `(u, v, d)` point.
pub type Uvd = [f64; 3];

impl CameraIntrinsics {
    /// Centered camera for a `width x height` image with the given focal length.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
            near: 0.1,
            far: 20.0,
        }
    }

    /// Default camera used by the dataset generator: horizontal field of view of
    /// roughly 53 degrees.
    pub fn for_size(width: usize, height: usize) -> Self {
        Self::centered(width, height, width as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.near > 0.0
            && self.near < self.far
            && self.width > 0
            && self.height > 0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.far.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Projects a world point to pixel coordinates plus raw depth.
    pub fn project_pixel(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let z = p[2];
        if !(z > self.near) {
            return Err(Error::ProjectionDomain { depth: z, near: self.near });
        }
        Ok([self.cx + self.fx * p[0] / z, self.cy - self.fy * p[1] / z, z])
    }

    /// Projects a world point to normalized `(u, v, d)`.
    pub fn project(&self, p: [f64; 3]) -> Result<Uvd> {
        let [u, v, z] = self.project_pixel(p)?;
        Ok([u / self.width as f64, v / self.height as f64, z / self.far])
    }

    /// Inverse of [`project`](Self::project).
    pub fn unproject(&self, uvd: Uvd) -> [f64; 3] {
        let z = uvd[2] * self.far;
        let u = uvd[0] * self.width as f64;
        let v = uvd[1] * self.height as f64;
        [(u - self.cx) * z / self.fx, -(v - self.cy) * z / self.fy, z]
    }

    /// World point on the ray through pixel coordinates `(u, v)` at depth `z`.
    pub fn unproject_pixel(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, -(v - self.cy) * z / self.fy, z]
    }

    /// Ray direction through pixel coordinates `(u, v)`, scaled so its z
    /// component is 1; the ray parameter then equals the depth.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, -(v - self.cy) / self.fy, 1.0]
    }

    /// Jacobian `d world / d (u, v, d)` of [`unproject`](Self::unproject), row-major.
    pub fn unproject_jacobian(&self, uvd: Uvd) -> [[f64; 3]; 3] {
        let (w, h, far) = (self.width as f64, self.height as f64, self.far);
        let z = uvd[2] * far;
        let du = uvd[0] * w - self.cx;
        let dv = uvd[1] * h - self.cy;
        [
            [w * z / self.fx, 0.0, du * far / self.fx],
            [0.0, -h * z / self.fy, -dv * far / self.fy],
            [0.0, 0.0, far],
        ]
    }
}
