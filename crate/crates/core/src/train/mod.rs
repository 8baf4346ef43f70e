//! Training and evaluation of the toy denoiser.
//!
//! One iteration draws `t` and `eps` per batch item from a generator keyed by
//! `(seed, iteration, item)`, so a run resumed from a checkpoint replays the
//! same noise as an uninterrupted run.

pub mod optim;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camera::CameraIntrinsics;
use crate::diffusion::ddim::{
    add_noise, ddim_step, diff_loss, final_step_eps_jacobian, run_to_final_step, sample_z0, EpsModel,
};
use crate::diffusion::denoiser::{backward, forward, Conditioned, DenoiserParams};
use crate::diffusion::{Grid, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::geomreg::{
    balance, build_neighbor_graph, calibrate_c, recon_loss, rigid_loss, rigidity_metric, smoothness_metric, total_loss, Balanced,
    LossWeights, NeighborGraph, PointBatch,
};
use crate::tensor::{to_diffusion, ForegroundMask, JointVideo};

pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Stage {
    #[cfg_attr(feature = "serde", serde(rename = "rgb"))]
    Rgb,
    #[cfg_attr(feature = "serde", serde(rename = "joint"))]
    Joint,
    #[cfg_attr(feature = "serde", serde(rename = "joint+reg"))]
    JointReg,
}

impl Stage {
    pub fn channels(&self) -> usize {
        match self {
            Stage::Rgb => 3,
            Stage::Joint | Stage::JointReg => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Rgb => "rgb",
            Stage::Joint => "joint",
            Stage::JointReg => "joint+reg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rgb" => Some(Stage::Rgb),
            "joint" => Some(Stage::Joint),
            "joint+reg" => Some(Stage::JointReg),
            _ => None,
        }
    }
}

/// One training or evaluation video held in diffusion range.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub grid: Grid,
    /// `[T, H, W, C]` with `C` = 3 (RGB stage) or 6.
    pub z0: Vec<f64>,
    pub channels: usize,
    /// First RGB frame, `[H, W, 3]`.
    pub cond: Vec<f64>,
    pub mask: ForegroundMask,
    pub camera: CameraIntrinsics,
    /// Foreground pixels, row-major, shared by every frame.
    pub pixels: Vec<(usize, usize)>,
    /// Ground-truth storage-range `(u, v, d)` per `[t * N + i]`.
    pub gt_uvd: Vec<[f64; 3]>,
    /// Ground-truth world trajectories of the foreground pixels.
    pub gt_world: PointBatch,
}

impl TrainSample {
    pub fn from_joint(joint: &JointVideo, mask: &ForegroundMask, camera: CameraIntrinsics, channels: usize) -> Result<Self> {
        if channels != 3 && channels != 6 {
            return Err(Error::Param(format!("channels must be 3 or 6, got {channels}")));
        }
        let (frames, h, w) = (joint.frames(), joint.height(), joint.width());
        mask.check_dims(h, w)?;
        if camera.width != w || camera.height != h {
            return Err(shape_err(&[camera.height, camera.width], &[h, w]));
        }
        let grid = Grid { frames, height: h, width: w };
        let data = joint.tensor().data();
        let mut z0 = Vec::with_capacity(grid.pixels() * channels);
        for px in data.chunks_exact(6) {
            z0.extend(px[..channels].iter().map(|&v| to_diffusion(v) as f64));
        }
        let cond = data[..h * w * 6].chunks_exact(6).flat_map(|px| px[..3].iter().map(|&v| to_diffusion(v) as f64)).collect();
        let pixels: Vec<(usize, usize)> = mask.pixels().collect();
        let mut gt_uvd = Vec::with_capacity(frames * pixels.len());
        for t in 0..frames {
            for &(r, c) in &pixels {
                let p = joint.pixel(t, r, c);
                gt_uvd.push([p[3] as f64, p[4] as f64, p[5] as f64]);
            }
        }
        let gt_world = PointBatch::new(frames, pixels.len(), gt_uvd.iter().map(|&q| camera.unproject(q)).collect())?;
        Ok(Self { grid, z0, channels, cond, mask: mask.clone(), camera, pixels, gt_uvd, gt_world })
    }

    #[inline]
    fn point_index(&self, t: usize, (r, c): (usize, usize)) -> usize {
        ((t * self.grid.height + r) * self.grid.width + c) * self.channels + 3
    }

    /// Foreground `(u, v, d)` in storage range taken from a joint sample in diffusion range.
    pub fn decode_uvd(&self, z: &[f64]) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.gt_uvd.len());
        for t in 0..self.grid.frames {
            for &px in &self.pixels {
                let o = self.point_index(t, px);
                out.push([(z[o] + 1.0) * 0.5, (z[o + 1] + 1.0) * 0.5, (z[o + 2] + 1.0) * 0.5]);
            }
        }
        out
    }

    pub fn world_points(&self, uvd: &[[f64; 3]]) -> Result<PointBatch> {
        PointBatch::new(self.grid.frames, self.pixels.len(), uvd.iter().map(|&q| self.camera.unproject(q)).collect())
    }
}

/// Everything `train_step` needs besides the model and data.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSettings {
    pub stage: Stage,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// DDIM steps used to recover `z0` on regularization iterations.
    pub recovery_steps: usize,
    pub graph_k: usize,
    pub seed: u64,
    /// Global gradient-norm clip applied to the batch gradient.
    pub max_grad_norm: Option<f64>,
}

impl StepSettings {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.learning_rate > 0.0) || self.recovery_steps == 0 || self.graph_k == 0 {
            return Err(Error::Param("learning_rate, recovery_steps and graph_k must be positive".into()));
        }
        if self.max_grad_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Param("max_grad_norm must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn regularizes(&self, iteration: u64) -> bool {
        self.stage == Stage::JointReg && iteration % self.weights.cadence_k as u64 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub l_diff: f64,
    /// Present only on regularization iterations.
    pub l_recon: Option<f64>,
    pub l_rigid: Option<f64>,
    pub total: f64,
}

/// Generator for one batch item of one iteration.
pub fn item_rng(seed: u64, iteration: u64, item: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    key[16..24].copy_from_slice(&item.to_le_bytes());
    key[24..].copy_from_slice(b"pvtrain1");
    ChaCha8Rng::from_seed(key)
}

pub fn draw_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Per-item losses and their parameter gradient.
struct ItemResult {
    l_diff: f64,
    reg: Option<(f64, f64)>,
    total: f64,
    grad: Vec<f64>,
}

fn check_stage(model: &DenoiserParams, sample: &TrainSample, stage: Stage) -> Result<()> {
    let c = model.config().in_channels;
    if c != stage.channels() || sample.channels != c {
        return Err(Error::Layout {
            expected: format!("{}-channel model and data for stage {}", stage.channels(), stage.name()),
            found: format!("model {c} channels, data {} channels", sample.channels),
        });
    }
    Ok(())
}

/// Reconstruction and rigidity losses of a recovered sample, with the gradient
/// of `lambda_recon * recon + lambda_rigid * rigid` w.r.t. the recovered `z0`.
pub fn regularization(sample: &TrainSample, z0_hat: &[f64], s: &StepSettings) -> Result<(f64, f64, Vec<f64>)> {
    let uvd = sample.decode_uvd(z0_hat);
    let pred = sample.world_points(&uvd)?;
    let (l_recon, g_recon) = recon_loss(&pred, &sample.gt_world, &s.weights)?;
    let n = pred.points();
    let (l_rigid, g_rigid) = if n >= 2 {
        // Graph and rest lengths come from the detached predicted frame 0.
        let graph = build_neighbor_graph(pred.frame(0), s.graph_k.min(n - 1))?;
        rigid_loss(&pred, &graph)?
    } else {
        (0.0, vec![[0.0; 3]; pred.values().len()])
    };
    let w = &s.weights;
    let mut dz = vec![0.0; z0_hat.len()];
    for t in 0..sample.grid.frames {
        for (i, &px) in sample.pixels.iter().enumerate() {
            let k = t * n + i;
            let gw: [f64; 3] =
                core::array::from_fn(|a| w.lambda_recon * g_recon[k][a] + w.lambda_rigid * g_rigid[k][a]);
            let jac = sample.camera.unproject_jacobian(uvd[k]);
            let o = sample.point_index(t, px);
            for b in 0..3 {
                let d_uvd = jac[0][b] * gw[0] + jac[1][b] * gw[1] + jac[2][b] * gw[2];
                dz[o + b] = 0.5 * d_uvd;
            }
        }
    }
    Ok((l_recon, l_rigid, dz))
}

fn item_step(
    model: &DenoiserParams,
    p: &[f64],
    sample: &TrainSample,
    s: &StepSettings,
    sched: &NoiseSchedule,
    iteration: u64,
    item: u64,
) -> Result<ItemResult> {
    let cfg = model.config();
    let layout = model.layout();
    let mut rng = item_rng(s.seed, iteration, item);
    let t = rng.random_range(1..=sched.steps());
    let eps = draw_noise(&mut rng, sample.z0.len());
    let z_t = add_noise(&sample.z0, &eps, t, sched)?;

    let (eps_hat, cache) = forward(cfg, layout, p, sample.grid, &z_t, t, &sample.cond)?;
    let (l_diff, d_diff) = diff_loss(&eps_hat, &eps)?;
    let lam = s.weights.lambda_diff;
    let mut grad = backward(cfg, layout, p, &cache, &d_diff)?;
    for g in grad.iter_mut() {
        *g *= lam;
    }

    let mut reg = None;
    let mut total = total_loss(l_diff, 0.0, 0.0, &s.weights);
    if s.regularizes(iteration) {
        let model_eps = Conditioned::new(model, p, sample.grid, &sample.cond);
        let (l_recon, l_rigid) = match run_to_final_step(&model_eps, &z_t, t, s.recovery_steps, sched)? {
            None => (0.0, 0.0),
            Some(last) => {
                let (e_last, c_last) = forward(cfg, layout, p, sample.grid, &last.z, last.t, &sample.cond)?;
                let raw = ddim_step(&last.z, &e_last, last.t, 0, sched)?;
                // Data lives in [-1, 1]; clamping keeps a poor early recovery from
                // producing unbounded geometry. Clamped entries pass no gradient.
                let z0_hat: Vec<f64> = raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
                let (l_recon, l_rigid, dz) = regularization(sample, &z0_hat, s)?;
                let j = final_step_eps_jacobian(last.t, sched);
                let d_eps: Vec<f64> =
                    dz.iter().zip(&raw).map(|(v, r)| if r.abs() < 1.0 { v * j } else { 0.0 }).collect();
                let g_reg = backward(cfg, layout, p, &c_last, &d_eps)?;
                for (g, r) in grad.iter_mut().zip(&g_reg) {
                    *g += r;
                }
                (l_recon, l_rigid)
            }
        };
        total = total_loss(l_diff, l_recon, l_rigid, &s.weights);
        reg = Some((l_recon, l_rigid));
    }
    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            iteration,
            detail: format!("batch item {item}, t={t}, l_diff={l_diff}, reg={reg:?}"),
        });
    }
    Ok(ItemResult { l_diff, reg, total, grad })
}

/// One optimizer update on the mean loss over `batch`.
pub fn train_step(
    model: &mut DenoiserParams,
    opt: &mut Optimizer,
    batch: &[&TrainSample],
    s: &StepSettings,
    sched: &NoiseSchedule,
    iteration: u64,
) -> Result<StepRecord> {
    s.validate()?;
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let p = model.to_f64();
    let mut grad = vec![0.0; p.len()];
    let (mut l_diff, mut total) = (0.0, 0.0);
    let mut reg: Option<(f64, f64)> = None;
    let inv = 1.0 / batch.len() as f64;
    for (k, sample) in batch.iter().enumerate() {
        check_stage(model, sample, s.stage)?;
        let r = item_step(model, &p, sample, s, sched, iteration, k as u64)?;
        for (g, v) in grad.iter_mut().zip(&r.grad) {
            *g += v * inv;
        }
        l_diff += r.l_diff * inv;
        total += r.total * inv;
        if let Some((a, b)) = r.reg {
            let acc = reg.get_or_insert((0.0, 0.0));
            acc.0 += a * inv;
            acc.1 += b * inv;
        }
    }
    if let Some(c) = s.max_grad_norm {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > c {
            let k = c / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
    }
    opt.apply(model.values_mut(), &grad, s.learning_rate)?;
    Ok(StepRecord { iteration, l_diff, l_recon: reg.map(|r| r.0), l_rigid: reg.map(|r| r.1), total })
}

/// Loss values of one sample without touching the parameters; noise is keyed
/// by `(seed, key)`.
pub fn measure_losses(
    model: &DenoiserParams,
    sample: &TrainSample,
    s: &StepSettings,
    sched: &NoiseSchedule,
    key: u64,
) -> Result<[f64; 3]> {
    let probe = StepSettings { stage: Stage::JointReg, weights: LossWeights { cadence_k: 1, ..s.weights }, ..s.clone() };
    check_stage(model, sample, probe.stage)?;
    let r = item_step(model, &model.to_f64(), sample, &probe, sched, key, u64::MAX)?;
    let (a, b) = r.reg.unwrap_or((0.0, 0.0));
    Ok([r.l_diff, a, b])
}

/// World-space points of a no-gradient recovery of `sample`, drawn like a
/// regularization step keyed by `(seed, key)`.
pub fn recover_points(
    model: &DenoiserParams,
    sample: &TrainSample,
    s: &StepSettings,
    sched: &NoiseSchedule,
    key: u64,
) -> Result<PointBatch> {
    check_stage(model, sample, Stage::Joint)?;
    let mut rng = item_rng(s.seed, key, u64::MAX);
    let t = rng.random_range(1..=sched.steps());
    let eps = draw_noise(&mut rng, sample.z0.len());
    let z_t = add_noise(&sample.z0, &eps, t, sched)?;
    let p = model.to_f64();
    let m = Conditioned::new(model, &p, sample.grid, &sample.cond);
    let z0: Vec<f64> = sample_z0(&m, &z_t, t, s.recovery_steps, sched)?.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    sample.world_points(&sample.decode_uvd(&z0))
}

/// Sets `c0..c2` so the reconstruction terms of the model's recoveries start
/// at the same scale.
pub fn calibrate_recon_weights(
    model: &DenoiserParams,
    samples: &[&TrainSample],
    s: &StepSettings,
    sched: &NoiseSchedule,
) -> Result<(LossWeights, Vec<String>)> {
    let mut pairs = Vec::with_capacity(samples.len());
    for (k, sample) in samples.iter().enumerate() {
        pairs.push((recover_points(model, sample, s, sched, k as u64)?, sample.gt_world.clone()));
    }
    let b = calibrate_c(&pairs)?;
    Ok((LossWeights { c0: b.weights[0], c1: b.weights[1], c2: b.weights[2], ..s.weights }, b.warnings))
}

/// `lambda_diff = 1`, the other two scaled to the mean diffusion loss.
pub fn lambdas_from_means(means: [f64; 3]) -> Balanced<3> {
    balance(means, ["diffusion", "reconstruction", "rigidity"])
}

pub fn calibrate_lambdas(
    model: &DenoiserParams,
    samples: &[&TrainSample],
    s: &StepSettings,
    sched: &NoiseSchedule,
) -> Result<(LossWeights, Vec<String>)> {
    if samples.is_empty() {
        return Err(Error::Param("calibrate_lambdas needs at least one sample".into()));
    }
    let mut means = [0.0; 3];
    for (k, sample) in samples.iter().enumerate() {
        let l = measure_losses(model, sample, s, sched, k as u64)?;
        for a in 0..3 {
            means[a] += l[a] / samples.len() as f64;
        }
    }
    let b = lambdas_from_means(means);
    let w = LossWeights {
        lambda_diff: b.weights[0],
        lambda_recon: b.weights[1],
        lambda_rigid: b.weights[2],
        ..s.weights
    };
    Ok((w, b.warnings))
}

/// Evaluation protocol: noise to `t`, recover with `steps` DDIM steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalProtocol {
    pub t: usize,
    pub steps: usize,
    pub seed: u64,
    pub graph_k: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { t: 500, steps: 20, seed: 0, graph_k: crate::geomreg::DEFAULT_GRAPH_K }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub point_mse: f64,
    pub rigidity: f64,
    pub smoothness: f64,
    pub foreground: usize,
}

/// Mean rest-distance deviation of the prediction against a graph built on
/// its own frame 0.
pub fn eval_rigidity(pred: &PointBatch, graph: &NeighborGraph) -> f64 {
    rigidity_metric(pred, graph)
}

pub fn eval_smoothness(pred: &PointBatch) -> f64 {
    smoothness_metric(pred)
}

/// Evaluates one sample under an arbitrary noise predictor.
pub fn evaluate_sample(
    model: &impl EpsModel,
    sample: &TrainSample,
    sched: &NoiseSchedule,
    proto: &EvalProtocol,
    index: u64,
) -> Result<SampleEval> {
    if sample.channels != 6 {
        return Err(Error::Param("point evaluation needs joint samples".into()));
    }
    let mut rng = item_rng(proto.seed, u64::MAX, index);
    let eps = draw_noise(&mut rng, sample.z0.len());
    let z_t = add_noise(&sample.z0, &eps, proto.t, sched)?;
    let z0_hat = sample_z0(model, &z_t, proto.t, proto.steps, sched)?;
    let uvd = sample.decode_uvd(&z0_hat);
    let n = uvd.len();
    let mut se = 0.0;
    for (a, b) in uvd.iter().zip(&sample.gt_uvd) {
        for k in 0..3 {
            let d = a[k] - b[k];
            se += d * d;
        }
    }
    let point_mse = if n == 0 { 0.0 } else { se / (3 * n) as f64 };
    let pred = sample.world_points(&uvd)?;
    let rigidity = if pred.points() >= 2 {
        let graph = build_neighbor_graph(pred.frame(0), proto.graph_k.min(pred.points() - 1))?;
        eval_rigidity(&pred, &graph)
    } else {
        0.0
    };
    Ok(SampleEval { point_mse, rigidity, smoothness: eval_smoothness(&pred), foreground: sample.pixels.len() })
}

/// Per-sample results over the first `n_samples` of `eval_set`.
pub fn eval_point_mse(
    model: &DenoiserParams,
    eval_set: &[&TrainSample],
    n_samples: usize,
    sched: &NoiseSchedule,
    proto: &EvalProtocol,
) -> Result<(f64, Vec<SampleEval>)> {
    let n = n_samples.min(eval_set.len());
    if n == 0 {
        return Err(Error::Param("empty evaluation set".into()));
    }
    let p = model.to_f64();
    let mut per = Vec::with_capacity(n);
    for (k, sample) in eval_set[..n].iter().enumerate() {
        check_stage(model, sample, Stage::Joint)?;
        let m = Conditioned::new(model, &p, sample.grid, &sample.cond);
        per.push(evaluate_sample(&m, sample, sched, proto, k as u64)?);
    }
    let mse = per.iter().map(|e| e.point_mse).sum::<f64>() / n as f64;
    Ok((mse, per))
}

#[cfg(test)]
mod tests;
