//! Geometric regularization of generated point trajectories.
//!
//! All losses are evaluated in `f64` on world-space `[T, N, 3]` batches and
//! return analytic gradients with respect to the predicted batch.
//!
//! The frame norm `||X||` of an `N x 3` frame is the mean over points of the
//! per-point Euclidean norm, which keeps the loss independent of `N`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kdtree::KdTree;

/// Default neighbor count for the rigidity graph.
pub const DEFAULT_GRAPH_K: usize = 8;

/// World-space trajectories `[T, N, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBatch {
    frames: usize,
    points: usize,
    values: Vec<[f64; 3]>,
}

impl PointBatch {
    pub fn new(frames: usize, points: usize, values: Vec<[f64; 3]>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Param("point batch needs at least one frame".into()));
        }
        if values.len() != frames * points {
            return Err(Error::Shape { left: vec![frames, points, 3], right: vec![values.len(), 3] });
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite point".into()));
        }
        Ok(Self { frames, points, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> [f64; 3] {
        self.values[t * self.points + i]
    }

    pub fn frame(&self, t: usize) -> &[[f64; 3]] {
        &self.values[t * self.points..(t + 1) * self.points]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Rebuilds a batch with this shape from a flat `[T * N * 3]` vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        Self::new(self.frames, self.points, flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn map(&self, f: impl Fn(usize, [f64; 3]) -> [f64; 3]) -> Result<Self> {
        let n = self.points.max(1);
        Self::new(self.frames, self.points, self.values.iter().enumerate().map(|(k, &p)| f(k / n, p)).collect())
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.frames != other.frames || self.points != other.points {
            return Err(Error::Shape {
                left: vec![self.frames, self.points, 3],
                right: vec![other.frames, other.points, 3],
            });
        }
        Ok(())
    }
}

/// Gradient with the same layout as a [`PointBatch`].
pub type PointGrad = Vec<[f64; 3]>;

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn norm(a: [f64; 3]) -> f64 {
    libm::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
}

/// kNN pairs on the reference frame with their rest distances.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub pairs: Vec<(usize, usize)>,
    pub rest_dist: Vec<f64>,
    pub k: usize,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Connects every point to its `k` nearest neighbors (self excluded, ties to the
/// lower index) and deduplicates the undirected pairs.
pub fn build_neighbor_graph(p0: &[[f64; 3]], k: usize) -> Result<NeighborGraph> {
    let n = p0.len();
    if k == 0 || n <= k {
        return Err(Error::Param(format!("neighbor graph needs N > k >= 1, got N={n}, k={k}")));
    }
    let tree = KdTree::new(p0.to_vec());
    let mut pairs = BTreeSet::new();
    for (i, p) in p0.iter().enumerate() {
        let found = tree.nearest(p, k + 1);
        for nb in found.iter().filter(|nb| nb.index != i).take(k) {
            pairs.insert((i.min(nb.index), i.max(nb.index)));
        }
    }
    let pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
    let rest_dist = pairs.iter().map(|&(i, j)| norm(sub(p0[i], p0[j]))).collect();
    Ok(NeighborGraph { pairs, rest_dist, k })
}

/// Loss term weights and the regularization cadence.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub lambda_diff: f64,
    pub lambda_recon: f64,
    pub lambda_rigid: f64,
    pub cadence_k: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { c0: 1.0, c1: 1.0, c2: 1.0, lambda_diff: 1.0, lambda_recon: 1.0, lambda_rigid: 1.0, cadence_k: 5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.c0, self.c1, self.c2, self.lambda_diff, self.lambda_recon, self.lambda_rigid];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if self.cadence_k == 0 {
            return Err(Error::Validation("cadence_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn c(&self) -> [f64; 3] {
        [self.c0, self.c1, self.c2]
    }
}

/// Unweighted position, velocity and acceleration terms of the reconstruction loss.
pub fn recon_terms(pred: &PointBatch, gt: &PointBatch) -> Result<[f64; 3]> {
    let (loss, _) = recon_loss_c(pred, gt, [1.0, 0.0, 0.0], false)?;
    let (vel, _) = recon_loss_c(pred, gt, [0.0, 1.0, 0.0], false)?;
    let (acc, _) = recon_loss_c(pred, gt, [0.0, 0.0, 1.0], false)?;
    Ok([loss, vel, acc])
}

/// Reconstruction loss: ground-truth fidelity plus first- and second-difference
/// smoothness of the prediction, weighted by `c0, c1, c2`.
pub fn recon_loss(pred: &PointBatch, gt: &PointBatch, w: &LossWeights) -> Result<(f64, PointGrad)> {
    recon_loss_c(pred, gt, w.c(), true)
}

fn recon_loss_c(pred: &PointBatch, gt: &PointBatch, c: [f64; 3], want_grad: bool) -> Result<(f64, PointGrad)> {
    pred.check_same_shape(gt)?;
    let (frames, n) = (pred.frames, pred.points);
    let mut grad = if want_grad { vec![[0.0; 3]; frames * n] } else { Vec::new() };
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    // (weight, [(frame offset, coefficient)], first frame index)
    let stencils: [(f64, &[(usize, f64)], usize); 3] =
        [(c[0], &[(0, 1.0)], 0), (c[1], &[(1, 1.0), (0, -1.0)], 1), (c[2], &[(2, 1.0), (1, -2.0), (0, 1.0)], 2)];
    for (term, &(weight, stencil, lag)) in stencils.iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let mut term_sum = 0.0;
        for t in lag..frames {
            let base = t - lag;
            let mut frame_sum = 0.0;
            for i in 0..n {
                let mut r = [0.0; 3];
                for &(off, coef) in stencil {
                    let p = pred.get(base + off, i);
                    for a in 0..3 {
                        r[a] += coef * p[a];
                    }
                }
                if term == 0 {
                    r = sub(r, gt.get(t, i));
                }
                let len = norm(r);
                frame_sum += len;
                if want_grad && len > 0.0 {
                    let s = weight * inv_n / len;
                    for &(off, coef) in stencil {
                        let g = &mut grad[(base + off) * n + i];
                        for a in 0..3 {
                            g[a] += s * coef * r[a];
                        }
                    }
                }
            }
            term_sum += frame_sum * inv_n;
        }
        total += weight * term_sum;
    }
    Ok((total, grad))
}

/// Rigidity loss: squared deviation of every graph pair's distance in frames
/// `1..T` from its rest distance. Rest distances are constants.
pub fn rigid_loss(pred: &PointBatch, graph: &NeighborGraph) -> Result<(f64, PointGrad)> {
    let n = pred.points;
    for &(i, j) in &graph.pairs {
        let bad = if i >= n { i } else { j };
        if i >= n || j >= n {
            return Err(Error::Graph { index: bad, n });
        }
    }
    let mut grad = vec![[0.0; 3]; pred.frames * n];
    let mut total = 0.0;
    for t in 1..pred.frames {
        for (&(i, j), &rest) in graph.pairs.iter().zip(&graph.rest_dist) {
            let d = sub(pred.get(t, i), pred.get(t, j));
            let len = norm(d);
            let dev = len - rest;
            total += dev * dev;
            if len > 0.0 {
                let s = 2.0 * dev / len;
                for a in 0..3 {
                    grad[t * n + i][a] += s * d[a];
                    grad[t * n + j][a] -= s * d[a];
                }
            }
        }
    }
    Ok((total, grad))
}

/// Weighted sum of the diffusion, reconstruction and rigidity losses.
pub fn total_loss(l_diff: f64, l_recon: f64, l_rigid: f64, w: &LossWeights) -> f64 {
    w.lambda_diff * l_diff + w.lambda_recon * l_recon + w.lambda_rigid * l_rigid
}

/// Weights that bring each term to the scale of the first one.
#[derive(Debug, Clone, PartialEq)]
pub struct Balanced<const K: usize> {
    pub weights: [f64; K],
    /// Human-readable notes for zero-mean terms.
    pub warnings: Vec<String>,
}

/// `w[0] = 1`, `w[k] = mean[0] / mean[k]`; zero-mean terms get weight 0.
pub fn balance<const K: usize>(means: [f64; K], names: [&str; K]) -> Balanced<K> {
    let mut warnings = Vec::new();
    let mut weights = [0.0; K];
    weights[0] = 1.0;
    if means.iter().all(|&m| m == 0.0) {
        warnings.push(format!("all terms have zero mean; keeping only {}", names[0]));
        return Balanced { weights, warnings };
    }
    for k in 1..K {
        if means[k] > 0.0 {
            weights[k] = means[0] / means[k];
        } else {
            warnings.push(format!("{} has zero mean; weight set to 0", names[k]));
        }
    }
    Balanced { weights, warnings }
}

/// Chooses `c0, c1, c2` so the three reconstruction terms start at the same
/// scale on the given `(prediction, ground truth)` samples.
pub fn calibrate_c(samples: &[(PointBatch, PointBatch)]) -> Result<Balanced<3>> {
    if samples.is_empty() {
        return Err(Error::Param("calibrate_c needs at least one sample".into()));
    }
    let mut means = [0.0; 3];
    for (pred, gt) in samples {
        let terms = recon_terms(pred, gt)?;
        for k in 0..3 {
            means[k] += terms[k] / samples.len() as f64;
        }
    }
    Ok(balance(means, ["position", "velocity", "acceleration"]))
}

/// Central-difference gradient of `f` at `x`, evaluated in `f64`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference gradient of a loss over a point batch.
pub fn fd_gradient_oracle(loss: impl Fn(&PointBatch) -> f64, pt: &PointBatch, h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Param("finite-difference step must be positive".into()));
    }
    let flat = pt.flatten();
    Ok(fd_gradient(|x| loss(&pt.with_flat(x).expect("same shape")), &flat, h))
}

/// Mean absolute deviation of pair distances from rest over frames `1..T`.
pub fn rigidity_metric(pred: &PointBatch, graph: &NeighborGraph) -> f64 {
    if pred.frames < 2 || graph.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for t in 1..pred.frames {
        for (&(i, j), &rest) in graph.pairs.iter().zip(&graph.rest_dist) {
            sum += (norm(sub(pred.get(t, i), pred.get(t, j))) - rest).abs();
        }
    }
    sum / ((pred.frames - 1) * graph.len()) as f64
}

/// Mean per-point norm of the second temporal difference.
pub fn smoothness_metric(pred: &PointBatch) -> f64 {
    if pred.frames < 3 || pred.points == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for t in 2..pred.frames {
        for i in 0..pred.points {
            let (a, b, c) = (pred.get(t, i), pred.get(t - 1, i), pred.get(t - 2, i));
            sum += norm([a[0] - 2.0 * b[0] + c[0], a[1] - 2.0 * b[1] + c[1], a[2] - 2.0 * b[2] + c[2]]);
        }
    }
    sum / ((pred.frames - 2) * pred.points) as f64
}
