//! File-level training and evaluation drivers.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use pointvid_core::diffusion::{augment_channels, DenoiserConfig, DenoiserParams};
use pointvid_core::geomreg::LossWeights;
use pointvid_core::train::{
    calibrate_lambdas, calibrate_recon_weights, eval_point_mse, item_rng, train_step, EvalProtocol, Optimizer, SampleEval, Stage, TrainSample,
};

use crate::checkpoint::{expect_config, load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::dataset::{load_prepared, LoadedScene};
use crate::error::{PvError, Result};
use crate::formats::write_json;
use crate::manifest::{MetricsRecord, MetricsWriter, METRICS};

pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const CALIBRATION: &str = "calibration.json";
pub const NAN_DUMP: &str = "nan_dump.json";

/// Salt separating batch selection from the noise draws of the same iteration.
const BATCH_SALT: u64 = 0xba7c_4e5e_1ec7_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub weights: LossWeights,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub start_iteration: u64,
    pub weights: LossWeights,
}

/// Model configuration a stage expects, given the configured widths.
pub fn stage_model(cfg: &TrainConfig) -> DenoiserConfig {
    let rgb = cfg.model.rgb();
    match cfg.stage {
        Stage::Rgb => rgb,
        Stage::Joint | Stage::JointReg => DenoiserConfig {
            in_channels: 6,
            cond_channels: 6,
            use_cross_attention: cfg.model.use_cross_attention,
            attention_heads: cfg.model.attention_heads,
            ..rgb
        },
    }
}

/// Starting model, optimizer and iteration for `cfg`, honoring the staging rules:
/// RGB starts fresh or resumes an RGB checkpoint; the joint stages need a
/// checkpoint, which is either widened (RGB) or continued (joint).
pub fn starting_point(cfg: &TrainConfig, resume: Option<&Path>) -> Result<(DenoiserParams, Optimizer, u64)> {
    let want = stage_model(cfg);
    let fresh_opt = |p: &DenoiserParams| Optimizer::new(cfg.optimizer, p.len());
    let ck: Option<Checkpoint> = resume.map(load_checkpoint).transpose()?;
    match (cfg.stage, ck) {
        (Stage::Rgb, None) => {
            let p = DenoiserParams::init(want, cfg.seed)?;
            let o = fresh_opt(&p)?;
            Ok((p, o, 0))
        }
        (Stage::Rgb, Some(ck)) => {
            expect_config(&ck, &want)?;
            Ok((ck.params, ck.optimizer, ck.meta.iteration))
        }
        (stage, None) => Err(PvError::Staging(format!(
            "stage {} needs --resume with an rgb checkpoint (to widen) or a joint checkpoint (to continue)",
            stage.name()
        ))),
        (_, Some(ck)) if ck.params.config().in_channels == 3 => {
            expect_config(&ck, &cfg.model.rgb())?;
            let p = augment_channels(&ck.params, want.use_cross_attention, want.attention_heads)?;
            let o = fresh_opt(&p)?;
            Ok((p, o, 0))
        }
        (_, Some(ck)) => {
            expect_config(&ck, &want)?;
            if ck.optimizer.kind != cfg.optimizer {
                return Err(PvError::Staging(format!(
                    "checkpoint optimizer {:?} differs from configured {:?}",
                    ck.optimizer.kind, cfg.optimizer
                )));
            }
            Ok((ck.params, ck.optimizer, ck.meta.iteration))
        }
    }
}

fn pick_batch(data: &[LoadedScene], cfg: &TrainConfig, it: u64) -> Vec<usize> {
    (0..cfg.batch_size as u64).map(|k| item_rng(cfg.seed ^ BATCH_SALT, it, k).random_range(0..data.len())).collect()
}

#[derive(Serialize)]
struct NanDump<'a> {
    iteration: u64,
    error: String,
    scenes: Vec<&'a str>,
    foreground_pixels: Vec<usize>,
}

fn dump_batch(out: &Path, it: u64, picks: &[usize], data: &[LoadedScene], e: &pointvid_core::Error) -> Result<()> {
    let dump = NanDump {
        iteration: it,
        error: e.to_string(),
        scenes: picks.iter().map(|&i| data[i].name.as_str()).collect(),
        foreground_pixels: picks.iter().map(|&i| data[i].sample.pixels.len()).collect(),
    };
    write_json(&dump, &out.join(NAN_DUMP))
}

pub fn evaluate(
    params: &DenoiserParams,
    data: &[LoadedScene],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<SampleEval>)> {
    let refs: Vec<&TrainSample> = data.iter().map(|s| &s.sample).collect();
    let proto: EvalProtocol = cfg.eval.protocol(cfg.graph_k);
    Ok(eval_point_mse(params, &refs, cfg.eval.samples, &cfg.schedule.build()?, &proto)?)
}

/// Runs `cfg` to `cfg.iterations`, writing metrics and checkpoints under `cfg.out`.
pub fn run_training(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let (mut params, mut opt, start) = starting_point(cfg, resume)?;
    if start > cfg.iterations {
        return Err(PvError::Staging(format!("checkpoint is at iteration {start}, past the configured {}", cfg.iterations)));
    }
    let data = load_prepared(&cfg.data, cfg.stage.channels())?;
    let eval_data = match (&cfg.eval_data, cfg.eval_every) {
        (Some(p), k) if k > 0 && cfg.stage != Stage::Rgb => Some(load_prepared(p, 6)?),
        _ => None,
    };
    let g = data[0].sample.grid;
    let grid = Some([g.frames, g.height, g.width]);
    std::fs::create_dir_all(&cfg.out).map_err(|e| PvError::io(&cfg.out, e))?;

    let mut settings = cfg.step_settings();
    if (cfg.calibrate_lambdas || cfg.calibrate_c) && cfg.stage != Stage::Rgb {
        let refs: Vec<&TrainSample> = data.iter().take(cfg.calibration_samples.max(1)).map(|s| &s.sample).collect();
        let mut warnings = Vec::new();
        if cfg.calibrate_c {
            let (w, warn) = calibrate_recon_weights(&params, &refs, &settings, &sched)?;
            settings.weights = w;
            warnings.extend(warn);
        }
        if cfg.calibrate_lambdas {
            let (w, warn) = calibrate_lambdas(&params, &refs, &settings, &sched)?;
            settings.weights = w;
            warnings.extend(warn);
        }
        write_json(&Calibration { weights: settings.weights, warnings }, &cfg.out.join(CALIBRATION))?;
    }

    let mut metrics = MetricsWriter::create(&cfg.out.join(METRICS))?;
    let mut records = Vec::with_capacity((cfg.iterations - start) as usize);
    for it in start..cfg.iterations {
        let clock = Instant::now();
        let picks = pick_batch(&data, cfg, it);
        let batch: Vec<&TrainSample> = picks.iter().map(|&i| &data[i].sample).collect();
        let r = match train_step(&mut params, &mut opt, &batch, &settings, &sched, it) {
            Err(e @ pointvid_core::Error::NonFinite { .. }) => {
                dump_batch(&cfg.out, it, &picks, &data, &e)?;
                return Err(e.into());
            }
            r => r?,
        };
        let done = it + 1;
        let point_mse = match &eval_data {
            Some(ev) if done % cfg.eval_every == 0 => Some(evaluate(&params, ev, cfg)?.0),
            _ => None,
        };
        let rec = MetricsRecord {
            iteration: it,
            l_diff: r.l_diff,
            l_recon: r.l_recon,
            l_rigid: r.l_rigid,
            total: r.total,
            point_mse,
            wall_clock_ms: cfg.wall_clock.then(|| clock.elapsed().as_secs_f64() * 1e3),
        };
        metrics.write(&rec)?;
        records.push(rec);
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
            save_checkpoint(&cfg.out.join(format!("checkpoint_{done:06}")), &params, &opt, cfg.stage, done, Some(cfg), grid)?;
        }
    }
    metrics.flush()?;
    let ck = cfg.out.join(FINAL_CHECKPOINT);
    save_checkpoint(&ck, &params, &opt, cfg.stage, cfg.iterations, Some(cfg), grid)?;
    Ok(TrainOutcome { checkpoint: ck, records, start_iteration: start, weights: settings.weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub name: String,
    pub point_mse: f64,
    pub rigidity: f64,
    pub smoothness: f64,
    pub foreground_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub stage: Stage,
    pub iteration: u64,
    pub t: usize,
    pub steps: usize,
    pub seed: u64,
    pub point_mse: f64,
    pub rigidity: f64,
    pub smoothness: f64,
    pub scenes: Vec<SceneReport>,
}

/// Evaluates a joint checkpoint on a prepared dataset.
pub fn eval_checkpoint(ckpt: &Path, data_dir: &Path, cfg: &TrainConfig) -> Result<EvalReport> {
    let ck = load_checkpoint(ckpt)?;
    if ck.params.config().in_channels != 6 {
        return Err(PvError::Staging(format!("{} is an RGB-only checkpoint; point evaluation needs a joint model", ckpt.display())));
    }
    let data = load_prepared(data_dir, 6)?;
    let (mse, per) = evaluate(&ck.params, &data, cfg)?;
    let n = per.len() as f64;
    let scenes = data
        .iter()
        .zip(&per)
        .map(|(s, e)| SceneReport {
            name: s.name.clone(),
            point_mse: e.point_mse,
            rigidity: e.rigidity,
            smoothness: e.smoothness,
            foreground_pixels: e.foreground,
        })
        .collect();
    Ok(EvalReport {
        checkpoint: ckpt.into(),
        data: data_dir.into(),
        stage: ck.meta.stage,
        iteration: ck.meta.iteration,
        t: cfg.eval.t,
        steps: cfg.eval.steps,
        seed: cfg.eval.seed,
        point_mse: mse,
        rigidity: per.iter().map(|e| e.rigidity).sum::<f64>() / n,
        smoothness: per.iter().map(|e| e.smoothness).sum::<f64>() / n,
        scenes,
    })
}
