//! Packing sparse tracks into a pixel-aligned point grid.
//!
//! Tracked foreground pixels copy their own trajectory. Untracked foreground
//! pixels take the inverse-square-distance weighted mean of the trajectories of
//! their `k` nearest tracked pixels, searched by frame-0 pixel position.
//! Background stays zero.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::camera::CameraIntrinsics;
use crate::error::{shape_err, Error, Result};
use crate::kdtree::KdTree;
use crate::tensor::{ForegroundMask, PointGrid, TensorF};
use crate::tracks::{TrackSet, TrackSpace};

/// Default neighbor count for interpolation.
pub const DEFAULT_KNN: usize = 3;

/// How one foreground pixel got its trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum PixelSource {
    Tracked { track: usize },
    /// `(track, weight)` pairs; weights are non-negative and sum to one.
    Interpolated { weights: Vec<(usize, f64)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridBuild {
    pub grid: PointGrid,
    /// Foreground pixels in row-major order with their provenance.
    pub sources: Vec<((usize, usize), PixelSource)>,
}

/// Inverse-square-distance weights with an exact-hit short circuit.
fn idw_weights(neighbors: &[(usize, f64)]) -> Vec<(usize, f64)> {
    if let Some(&(j, _)) = neighbors.iter().find(|(_, d2)| *d2 == 0.0) {
        return vec![(j, 1.0)];
    }
    let total: f64 = neighbors.iter().map(|(_, d2)| 1.0 / d2).sum();
    neighbors.iter().map(|&(j, d2)| (j, (1.0 / d2) / total)).collect()
}

/// Builds the `[T, H, W, 3]` grid of normalized `(u, v, d)` trajectories.
///
/// World-space tracks are projected through `cam`; normalized tracks are used
/// as they are. Tracks are not smoothed here.
pub fn build_point_grid(
    tracks: &TrackSet,
    mask: &ForegroundMask,
    cam: &CameraIntrinsics,
    height: usize,
    width: usize,
    knn: usize,
) -> Result<GridBuild> {
    mask.check_dims(height, width)?;
    if knn == 0 {
        return Err(Error::Param("knn must be positive".into()));
    }
    let frames = tracks.frames();
    let normalized = match tracks.space() {
        TrackSpace::Normalized => tracks.clone(),
        TrackSpace::World => tracks.to_normalized(cam)?,
    };

    // Tracked anchors that fall on the foreground; first track wins a pixel.
    let mut anchor_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (j, &[c, r]) in normalized.anchor_uv().iter().enumerate() {
        let (r, c) = (r as usize, c as usize);
        if r >= height || c >= width {
            return Err(Error::Param(format!("anchor ({c},{r}) outside {width}x{height} image")));
        }
        if mask.get(r, c) {
            anchor_of.entry((r, c)).or_insert(j);
        }
    }

    let mut data = vec![0.0f32; frames * height * width * 3];
    let mut sources = Vec::with_capacity(mask.count());
    if mask.is_empty() {
        let grid = PointGrid::new(TensorF::new(vec![frames, height, width, 3], data)?)?;
        return Ok(GridBuild { grid, sources });
    }
    if anchor_of.is_empty() {
        return Err(Error::Pipeline(format!(
            "{} foreground pixels but no tracked anchor inside the mask",
            mask.count()
        )));
    }

    let tracked: Vec<usize> = anchor_of.values().copied().collect();
    let tree = KdTree::new(
        anchor_of.keys().map(|&(r, c)| [c as f64, r as f64]).collect::<Vec<[f64; 2]>>(),
    );
    let k = knn.min(tracked.len());

    for (r, c) in mask.pixels() {
        let source = match anchor_of.get(&(r, c)) {
            Some(&j) => PixelSource::Tracked { track: j },
            None => {
                let near: Vec<(usize, f64)> =
                    tree.nearest(&[c as f64, r as f64], k).iter().map(|n| (tracked[n.index], n.dist_sq)).collect();
                PixelSource::Interpolated { weights: idw_weights(&near) }
            }
        };
        for t in 0..frames {
            let value: [f32; 3] = match &source {
                PixelSource::Tracked { track } => normalized.get(t, *track).map(|v| v as f32),
                PixelSource::Interpolated { weights } => {
                    let mut acc = [0.0f64; 3];
                    for &(j, w) in weights {
                        let p = normalized.get(t, j);
                        for a in 0..3 {
                            acc[a] += w * p[a];
                        }
                    }
                    acc.map(|v| v as f32)
                }
            };
            let i = ((t * height + r) * width + c) * 3;
            data[i..i + 3].copy_from_slice(&value);
        }
        sources.push(((r, c), source));
    }
    let grid = PointGrid::new(TensorF::new(vec![frames, height, width, 3], data)?)?;
    Ok(GridBuild { grid, sources })
}

/// Foreground trajectories gathered out of a point grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoints {
    pub frames: usize,
    /// `values[t * pixels.len() + i]`
    pub values: Vec<[f32; 3]>,
    /// `(row, col)` of each point, row-major.
    pub pixels: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
}

impl GridPoints {
    pub fn points(&self) -> usize {
        self.pixels.len()
    }

    pub fn get(&self, t: usize, i: usize) -> [f32; 3] {
        self.values[t * self.pixels.len() + i]
    }
}

/// Gathers the foreground pixels of `grid` into a `[T, N, 3]` batch.
pub fn grid_to_points(grid: &PointGrid, mask: &ForegroundMask) -> Result<GridPoints> {
    if mask.height() != grid.height() || mask.width() != grid.width() {
        return Err(shape_err(&[mask.height(), mask.width()], &grid.tensor().dims()[1..3]));
    }
    let pixels: Vec<(usize, usize)> = mask.pixels().collect();
    let mut values = Vec::with_capacity(grid.frames() * pixels.len());
    for t in 0..grid.frames() {
        for &(r, c) in &pixels {
            let p = grid.pixel(t, r, c);
            values.push([p[0], p[1], p[2]]);
        }
    }
    Ok(GridPoints { frames: grid.frames(), values, pixels, height: grid.height(), width: grid.width() })
}

/// Writes gathered points back into a zero grid.
pub fn scatter_points(points: &GridPoints) -> Result<PointGrid> {
    let (h, w) = (points.height, points.width);
    let mut data = vec![0.0f32; points.frames * h * w * 3];
    for t in 0..points.frames {
        for (i, &(r, c)) in points.pixels.iter().enumerate() {
            let o = ((t * h + r) * w + c) * 3;
            data[o..o + 3].copy_from_slice(&points.get(t, i));
        }
    }
    PointGrid::new(TensorF::new(vec![points.frames, h, w, 3], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::for_size(8, 8)
    }

    fn normalized_tracks(frames: usize, anchors: &[[u32; 2]], value: impl Fn(usize, usize) -> [f64; 3]) -> TrackSet {
        let n = anchors.len();
        let pos = (0..frames).flat_map(|t| (0..n).map(move |i| (t, i))).map(|(t, i)| value(t, i)).collect();
        TrackSet::new(frames, n, pos, anchors.to_vec(), vec![0; n], TrackSpace::Normalized).unwrap()
    }

    #[test]
    fn empty_mask_gives_zero_grid() {
        let tr = normalized_tracks(2, &[[1, 1]], |_, _| [0.5; 3]);
        let b = build_point_grid(&tr, &ForegroundMask::empty(8, 8), &cam(), 8, 8, 3).unwrap();
        assert!(b.grid.tensor().data().iter().all(|&v| v == 0.0));
        assert!(b.sources.is_empty());
    }

    #[test]
    fn no_anchor_in_mask_is_a_pipeline_error() {
        let tr = normalized_tracks(2, &[[1, 1]], |_, _| [0.5; 3]);
        let mut m = ForegroundMask::empty(8, 8);
        m.set(5, 5, true);
        assert!(matches!(build_point_grid(&tr, &m, &cam(), 8, 8, 3), Err(Error::Pipeline(_))));
    }

    #[test]
    fn equidistant_pixel_averages_three_anchors() {
        // (row 4, col 4) is at squared distance 4 from anchors at cols/rows 2 and 6 and row 2.
        let anchors = [[2, 4], [6, 4], [4, 2]];
        let tr = normalized_tracks(3, &anchors, |t, i| [0.1 * i as f64 + t as f64, 0.2 * i as f64, 0.3]);
        let mut m = ForegroundMask::empty(8, 8);
        for &[c, r] in &anchors {
            m.set(r as usize, c as usize, true);
        }
        m.set(4, 4, true);
        let b = build_point_grid(&tr, &m, &cam(), 8, 8, 3).unwrap();
        for t in 0..3 {
            let expect: [f64; 3] = core::array::from_fn(|a| (0..3).map(|i| tr.get(t, i)[a]).sum::<f64>() / 3.0);
            let got = b.grid.pixel(t, 4, 4);
            for a in 0..3 {
                assert!((got[a] as f64 - expect[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn exact_hit_short_circuits() {
        let w = idw_weights(&[(4, 0.0), (1, 2.0), (2, 3.0)]);
        assert_eq!(w, vec![(4, 1.0)]);
        let w = idw_weights(&[(0, 1.0), (1, 4.0)]);
        assert!((w[0].1 - 0.8).abs() < 1e-15 && (w[1].1 - 0.2).abs() < 1e-15);
    }

    #[test]
    fn anchor_outside_mask_is_ignored_and_background_zero() {
        let anchors = [[0, 0], [3, 3]];
        let tr = normalized_tracks(2, &anchors, |_, i| [0.9, 0.8, 0.7 - i as f64 * 0.1]);
        let mut m = ForegroundMask::empty(8, 8);
        m.set(3, 3, true);
        m.set(3, 4, true);
        let b = build_point_grid(&tr, &m, &cam(), 8, 8, 3).unwrap();
        assert_eq!(b.grid.max_background_abs(&m).unwrap(), 0.0);
        assert_eq!(b.grid.pixel(1, 3, 4), &[0.9f32, 0.8, 0.6]);
        assert_eq!(b.sources[0].1, PixelSource::Tracked { track: 1 });
        assert_eq!(b.sources[1].1, PixelSource::Interpolated { weights: vec![(1, 1.0)] });
    }

    #[test]
    fn gather_and_scatter() {
        let mut m = ForegroundMask::empty(4, 4);
        m.set(2, 1, true);
        m.set(0, 3, true);
        let data: Vec<f32> = (0..2 * 4 * 4 * 3).map(|i| i as f32 * 0.01).collect();
        let g = PointGrid::new(TensorF::new(vec![2, 4, 4, 3], data).unwrap()).unwrap();
        let pts = grid_to_points(&g, &m).unwrap();
        assert_eq!(pts.pixels, vec![(0, 3), (2, 1)]);
        assert_eq!(pts.get(1, 1), [g.pixel(1, 2, 1)[0], g.pixel(1, 2, 1)[1], g.pixel(1, 2, 1)[2]]);
        let back = scatter_points(&pts).unwrap();
        for t in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    let want: &[f32] = if m.get(r, c) { g.pixel(t, r, c) } else { &[0.0; 3] };
                    assert_eq!(back.pixel(t, r, c), want);
                }
            }
        }
        let none = grid_to_points(&g, &ForegroundMask::empty(4, 4)).unwrap();
        assert_eq!(none.points(), 0);
        assert!(grid_to_points(&g, &ForegroundMask::empty(3, 4)).is_err());
    }
}
