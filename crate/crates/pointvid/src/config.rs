//! Training configuration shared by the `train` command and the ablation runner.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pointvid_core::diffusion::{make_schedule, DenoiserConfig, NoiseSchedule};
use pointvid_core::geomreg::{LossWeights, DEFAULT_GRAPH_K};
use pointvid_core::train::{EvalProtocol, OptimizerKind, Stage, StepSettings};

use crate::error::{PvError, Result};
use crate::formats::read_json;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(self.steps, self.beta_min, self.beta_max)?)
    }
}

/// Width/depth of the denoiser; channel counts follow from the stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub use_cross_attention: bool,
    pub attention_heads: usize,
    /// Feed normalized pixel coordinates to the first convolution.
    pub coordinates: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 8,
            depth: 2,
            time_embed_dim: 16,
            use_cross_attention: false,
            attention_heads: 2,
            coordinates: true,
        }
    }
}

impl ModelConfig {
    pub fn rgb(&self) -> DenoiserConfig {
        DenoiserConfig::rgb(self.hidden_channels, self.depth, self.time_embed_dim).with_coords(self.coordinates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Noise level the ground truth is pushed to before recovery.
    pub t: usize,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { t: 500, steps: 20, samples: 16, seed: 0 }
    }
}

impl EvalConfig {
    pub fn protocol(&self, graph_k: usize) -> EvalProtocol {
        EvalProtocol { t: self.t, steps: self.steps, seed: self.seed, graph_k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: PathBuf,
    /// Evaluated every `eval_every` iterations when set.
    pub eval_data: Option<PathBuf>,
    pub out: PathBuf,
    pub stage: Stage,
    /// Final iteration count (a resumed run continues up to this value).
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub recovery_steps: usize,
    pub graph_k: usize,
    pub seed: u64,
    /// `null` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub eval_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Re-derive the loss weights from the starting model before training.
    pub calibrate_lambdas: bool,
    /// Re-derive `c0..c2` from the starting model's recoveries (before the lambdas).
    pub calibrate_c: bool,
    pub calibration_samples: usize,
    /// Record wall-clock time per iteration (makes metrics non-reproducible).
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/train"),
            eval_data: None,
            out: PathBuf::from("runs/train"),
            stage: Stage::Rgb,
            iterations: 1000,
            batch_size: 1,
            learning_rate: 2e-3,
            optimizer: OptimizerKind::default(),
            weights: LossWeights::default(),
            recovery_steps: 20,
            graph_k: DEFAULT_GRAPH_K,
            seed: 0,
            max_grad_norm: Some(1.0),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
            eval_every: 0,
            checkpoint_every: 0,
            calibrate_lambdas: false,
            calibrate_c: false,
            calibration_samples: 8,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(PvError::Input("iterations and batch_size must be positive".into()));
        }
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.schedule.build()?;
        self.step_settings().validate()?;
        let t = self.eval.t;
        if t == 0 || t > self.schedule.steps || self.eval.steps == 0 {
            return Err(PvError::Input(format!("eval.t must be in 1..={} and eval.steps positive", self.schedule.steps)));
        }
        Ok(())
    }

    pub fn step_settings(&self) -> StepSettings {
        StepSettings {
            stage: self.stage,
            learning_rate: self.learning_rate,
            weights: self.weights,
            recovery_steps: self.recovery_steps,
            graph_k: self.graph_k,
            seed: self.seed,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

/// Seed override from the environment.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("POINTVID_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| PvError::Input(format!("POINTVID_SEED={v:?} is not a u64"))),
        Err(_) => Ok(None),
    }
}
