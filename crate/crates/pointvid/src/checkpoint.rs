//! Checkpoint directories.
//!
//! ```text
//! <dir>/checkpoint.json   CheckpointMeta (config, layout, optimizer, iteration)
//!       params.vpt        [P] f32 parameters
//!       opt_m.vpt         [P] first moment / SGD velocity
//!       opt_v.vpt         [P] second moment (Adam only)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pointvid_core::diffusion::denoiser::describe;
use pointvid_core::diffusion::{DenoiserConfig, DenoiserParams, Layout};
use pointvid_core::tensor::TensorF;
use pointvid_core::train::{Optimizer, OptimizerKind, Stage};

use crate::config::TrainConfig;
use crate::error::{PvError, Result};
use crate::formats::{read_json, read_tensor, write_json, write_tensor};

pub const FORMAT: &str = "pointvid-checkpoint/1";
pub const META: &str = "checkpoint.json";
pub const PARAMS: &str = "params.vpt";
pub const OPT_M: &str = "opt_m.vpt";
pub const OPT_V: &str = "opt_v.vpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub stage: Stage,
    /// Iterations completed.
    pub iteration: u64,
    pub denoiser: DenoiserConfig,
    pub layout: Layout,
    pub optimizer: OptimizerKind,
    pub optimizer_step: u64,
    pub train: Option<TrainConfig>,
    /// `[frames, height, width]` of the training data, when known.
    #[serde(default)]
    pub grid: Option<[usize; 3]>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: DenoiserParams,
    pub optimizer: Optimizer,
}

fn vector(values: &[f32]) -> Result<Option<TensorF>> {
    if values.is_empty() {
        return Ok(None);
    }
    Ok(Some(TensorF::new(vec![values.len()], values.to_vec())?))
}

pub fn save_checkpoint(
    dir: &Path,
    params: &DenoiserParams,
    opt: &Optimizer,
    stage: Stage,
    iteration: u64,
    train: Option<&TrainConfig>,
    grid: Option<[usize; 3]>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PvError::io(dir, e))?;
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        stage,
        iteration,
        denoiser: *params.config(),
        layout: params.layout().clone(),
        optimizer: opt.kind,
        optimizer_step: opt.step,
        train: train.cloned(),
        grid,
    };
    write_tensor(&vector(params.values())?.expect("non-empty model"), &dir.join(PARAMS))?;
    if let Some(t) = vector(&opt.m)? {
        write_tensor(&t, &dir.join(OPT_M))?;
    }
    if let Some(t) = vector(&opt.v)? {
        write_tensor(&t, &dir.join(OPT_V))?;
    }
    write_json(&meta, &dir.join(META))
}

fn read_vector(path: &Path, n: usize) -> Result<Vec<f32>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let t = read_tensor(path)?;
    if t.dims() != [n] {
        return Err(PvError::Staging(format!("{}: expected [{n}], found {:?}", path.display(), t.dims())));
    }
    Ok(t.into_parts().1)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join(META);
    if !meta_path.is_file() {
        return Err(PvError::Input(format!("no checkpoint at {}", dir.display())));
    }
    let meta: CheckpointMeta = read_json(&meta_path)?;
    if meta.format != FORMAT {
        return Err(PvError::Staging(format!("checkpoint format {:?}, expected {FORMAT:?}", meta.format)));
    }
    let expected = meta.denoiser.layout();
    if meta.layout != expected {
        return Err(PvError::Staging(format!(
            "checkpoint layout does not match its config\n  config layout: {}\n  stored layout: {}",
            describe(&expected),
            describe(&meta.layout)
        )));
    }
    let n = expected.total();
    let values = read_vector(&dir.join(PARAMS), n)?;
    let params = DenoiserParams::new(meta.denoiser, values)?;
    let m = read_vector(&dir.join(OPT_M), n)?;
    let v = read_vector(&dir.join(OPT_V), n)?;
    let optimizer = Optimizer::restore(meta.optimizer, meta.optimizer_step, m, v, n)?;
    Ok(Checkpoint { meta, params, optimizer })
}

/// Refuses a checkpoint whose model differs from `want`, printing both layouts.
pub fn expect_config(ck: &Checkpoint, want: &DenoiserConfig) -> Result<()> {
    if ck.params.config() != want {
        return Err(PvError::Staging(format!(
            "checkpoint model does not match the requested configuration\n  requested: {want}\n    {}\n  checkpoint: {}\n    {}",
            describe(&want.layout()),
            ck.params.config(),
            describe(ck.params.layout())
        )));
    }
    Ok(())
}
