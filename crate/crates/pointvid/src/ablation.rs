//! Regularization ablation: untrained vs joint fine-tuning without and with
//! the geometric regularizers, at matched iteration budgets.
//!
//! ```text
//! <out>/data/{raw,train,eval}/...   generated and prepared scenes (unless given)
//!       rgb/                        RGB pretraining run
//!       untrained/checkpoint        RGB model widened to 6 channels, no fine-tuning
//!       shared/                     joint fine-tuning shared by both branches
//!       no_reg/  with_reg/          the two branches, resumed from shared/checkpoint
//!       eval_{untrained,no_reg,with_reg}.json
//!       ablation.json
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pointvid_core::geomreg::{LossWeights, DEFAULT_GRAPH_K};
use pointvid_core::pipeline::PrepSettings;
use pointvid_core::train::{OptimizerKind, Stage};

use crate::checkpoint::save_checkpoint;
use crate::config::{EvalConfig, ModelConfig, ScheduleConfig, TrainConfig};
use crate::dataset::{gen_data, prep_all, GenOptions};
use crate::error::{PvError, Result};
use crate::formats::{read_json, write_json};
use crate::training::{eval_checkpoint, run_training, starting_point, EvalReport, FINAL_CHECKPOINT};

pub const REPORT: &str = "ablation.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub out: PathBuf,
    /// Prepared datasets; generated under `<out>/data` when absent.
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub data_seed: u64,
    pub eval_data_seed: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
    pub optimizer: OptimizerKind,
    pub rgb_iterations: u64,
    pub rgb_learning_rate: f64,
    /// Joint iterations shared by both branches before they split.
    pub shared_iterations: u64,
    /// Joint iterations each branch ends at.
    pub joint_iterations: u64,
    pub joint_learning_rate: f64,
    pub batch_size: usize,
    /// Base weights; c0..c2 and the lambdas are recalibrated on the shared checkpoint.
    pub weights: LossWeights,
    pub recovery_steps: usize,
    pub graph_k: usize,
    pub max_grad_norm: Option<f64>,
    pub calibration_samples: usize,
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/ablation"),
            train_data: None,
            eval_data: None,
            train_scenes: 64,
            eval_scenes: 16,
            frames: 8,
            width: 32,
            height: 32,
            stride: 4,
            data_seed: 1,
            eval_data_seed: 2,
            seed: 0,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
            optimizer: OptimizerKind::default(),
            rgb_iterations: 1500,
            rgb_learning_rate: 2e-3,
            shared_iterations: 1000,
            joint_iterations: 2000,
            joint_learning_rate: 2e-3,
            batch_size: 1,
            weights: LossWeights::default(),
            recovery_steps: 20,
            graph_k: DEFAULT_GRAPH_K,
            max_grad_norm: Some(1.0),
            calibration_samples: 8,
            jobs: 1,
        }
    }
}

impl AblationConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared_iterations >= self.joint_iterations {
            return Err(PvError::Input(format!(
                "shared_iterations ({}) must be below joint_iterations ({})",
                self.shared_iterations, self.joint_iterations
            )));
        }
        if self.rgb_iterations == 0 || self.shared_iterations == 0 {
            return Err(PvError::Input("rgb_iterations and shared_iterations must be positive".into()));
        }
        Ok(())
    }

    fn train_config(&self, stage: Stage, data: &Path, out: PathBuf, iterations: u64) -> TrainConfig {
        let rgb = stage == Stage::Rgb;
        TrainConfig {
            data: data.into(),
            eval_data: None,
            out,
            stage,
            iterations,
            batch_size: self.batch_size,
            learning_rate: if rgb { self.rgb_learning_rate } else { self.joint_learning_rate },
            optimizer: self.optimizer,
            weights: self.weights,
            recovery_steps: self.recovery_steps,
            graph_k: self.graph_k,
            seed: self.seed,
            max_grad_norm: self.max_grad_norm,
            model: self.model,
            schedule: self.schedule,
            eval: self.eval,
            eval_every: 0,
            checkpoint_every: 0,
            calibrate_lambdas: stage == Stage::JointReg,
            calibrate_c: stage == Stage::JointReg,
            calibration_samples: self.calibration_samples,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub point_mse: f64,
    pub rigidity: f64,
    pub smoothness: f64,
}

impl From<&EvalReport> for Arm {
    fn from(r: &EvalReport) -> Self {
        Self { point_mse: r.point_mse, rigidity: r.rigidity, smoothness: r.smoothness }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub untrained: Arm,
    pub no_reg: Arm,
    pub with_reg: Arm,
    pub weights: LossWeights,
    pub joint_iterations: u64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Orderings the ablation is expected to show.
pub fn ablation_checks(untrained: &Arm, no_reg: &Arm, with_reg: &Arm) -> Vec<Check> {
    let check = |name: &str, lhs: f64, rhs: f64| Check { name: name.into(), lhs, rhs, pass: lhs >= rhs };
    vec![
        check("untrained point_mse >= 10 x no_reg point_mse", untrained.point_mse, 10.0 * no_reg.point_mse),
        check("no_reg point_mse >= with_reg point_mse", no_reg.point_mse, with_reg.point_mse),
        check("no_reg rigidity >= with_reg rigidity", no_reg.rigidity, with_reg.rigidity),
    ]
}

fn ensure_data(cfg: &AblationConfig) -> Result<(PathBuf, PathBuf)> {
    let data = cfg.out.join("data");
    let make = |name: &str, scenes: usize, seed: u64| -> Result<PathBuf> {
        let raw = data.join("raw").join(name);
        let prepared = data.join(name);
        let opts = GenOptions { scenes, frames: cfg.frames, width: cfg.width, height: cfg.height, stride: cfg.stride, seed };
        gen_data(&opts, &raw, cfg.jobs)?;
        prep_all(&raw, &prepared, &PrepSettings::default(), cfg.jobs)?;
        Ok(prepared)
    };
    let train = match &cfg.train_data {
        Some(p) => p.clone(),
        None => make("train", cfg.train_scenes, cfg.data_seed)?,
    };
    let eval = match &cfg.eval_data {
        Some(p) => p.clone(),
        None => make("eval", cfg.eval_scenes, cfg.eval_data_seed)?,
    };
    Ok((train, eval))
}

/// Runs the whole protocol, logging progress through `log`.
pub fn run_ablation(cfg: &AblationConfig, mut log: impl FnMut(&str)) -> Result<AblationReport> {
    cfg.validate()?;
    let (train, eval) = ensure_data(cfg)?;
    log(&format!("data: {} / {}", train.display(), eval.display()));

    let rgb = cfg.train_config(Stage::Rgb, &train, cfg.out.join("rgb"), cfg.rgb_iterations);
    let rgb_run = run_training(&rgb, None)?;
    log(&format!("rgb pretraining: {} iterations", cfg.rgb_iterations));

    let shared = cfg.train_config(Stage::Joint, &train, cfg.out.join("shared"), cfg.shared_iterations);
    let untrained = cfg.out.join("untrained").join(FINAL_CHECKPOINT);
    let (p, o, _) = starting_point(&shared, Some(&rgb_run.checkpoint))?;
    let g = crate::dataset::load_prepared(&train, 6)?[0].sample.grid;
    save_checkpoint(&untrained, &p, &o, Stage::Joint, 0, Some(&shared), Some([g.frames, g.height, g.width]))?;
    let shared_run = run_training(&shared, Some(&rgb_run.checkpoint))?;
    log(&format!("shared joint fine-tuning: {} iterations", cfg.shared_iterations));

    let no_reg = cfg.train_config(Stage::Joint, &train, cfg.out.join("no_reg"), cfg.joint_iterations);
    let no_reg_run = run_training(&no_reg, Some(&shared_run.checkpoint))?;
    log("no-reg branch done");
    let with_reg = cfg.train_config(Stage::JointReg, &train, cfg.out.join("with_reg"), cfg.joint_iterations);
    let with_reg_run = run_training(&with_reg, Some(&shared_run.checkpoint))?;
    log(&format!("with-reg branch done, weights {:?}", with_reg_run.weights));

    let mut arms = Vec::new();
    for (name, ck) in [("untrained", &untrained), ("no_reg", &no_reg_run.checkpoint), ("with_reg", &with_reg_run.checkpoint)] {
        let report = eval_checkpoint(ck, &eval, &no_reg)?;
        write_json(&report, &cfg.out.join(format!("eval_{name}.json")))?;
        log(&format!("{name}: point_mse {:.6e} rigidity {:.6e} smoothness {:.6e}", report.point_mse, report.rigidity, report.smoothness));
        arms.push(Arm::from(&report));
    }
    let checks = ablation_checks(&arms[0], &arms[1], &arms[2]);
    let report = AblationReport {
        untrained: arms[0],
        no_reg: arms[1],
        with_reg: arms[2],
        weights: with_reg_run.weights,
        joint_iterations: cfg.joint_iterations,
        pass: checks.iter().all(|c| c.pass),
        checks,
    };
    write_json(&report, &cfg.out.join(REPORT))?;
    Ok(report)
}
