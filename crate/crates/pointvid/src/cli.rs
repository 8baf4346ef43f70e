//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pointvid_core::pipeline::PrepSettings;
use pointvid_core::tracks::{KalmanSpec, NoiseSpec};
use pointvid_core::train::Stage;

use crate::ablation::{run_ablation, AblationConfig};
use crate::config::{env_seed, TrainConfig};
use crate::dataset::{gen_data, prep_all, GenOptions};
use crate::error::{PvError, Result};
use crate::formats::write_json;
use crate::infer::{render, sample, SampleOptions, DEFAULT_MIN_DEPTH};
use crate::manifest::{RunManifest, METRICS};
use crate::training::{eval_checkpoint, run_training, CALIBRATION, FINAL_CHECKPOINT};

#[derive(Debug, Parser)]
#[command(name = "pointvid", version, about = "Point-augmented video diffusion lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic rigid-body scenes with oracle tracks.
    GenData(GenDataArgs),
    /// Build point grids and joint videos from generated scenes.
    Prep(PrepArgs),
    /// Train a denoiser stage.
    Train(TrainArgs),
    /// Evaluate a joint checkpoint on prepared data.
    Eval(EvalArgs),
    /// Sample a joint video from noise given a conditioning frame.
    Sample(SampleArgs),
    /// Write PPM frames and PLY point clouds for a joint video.
    Render(RenderArgs),
    /// Run the full regularization ablation.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    pub scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "32x32")]
    pub size: String,
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Track noise standard deviation in normalized units.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub outlier_prob: f64,
    #[arg(long, default_value_t = 5.0)]
    pub outlier_scale: f64,
    #[arg(long)]
    pub kalman_q: Option<f64>,
    #[arg(long)]
    pub kalman_r: Option<f64>,
    #[arg(long, default_value_t = 3)]
    pub knn: usize,
    /// Skip Kalman smoothing.
    #[arg(long)]
    pub no_smooth: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_stage)]
    pub stage: Option<Stage>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub cadence_k: Option<u32>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub calibrate_lambdas: bool,
    /// Balance the reconstruction terms on the starting model before the lambdas.
    #[arg(long)]
    pub calibrate_c: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Conditioning frame (binary PPM).
    #[arg(long)]
    pub cond: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// scene.json supplying the camera; defaults to one next to the input.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_DEPTH)]
    pub min_depth: f64,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage {s:?} (expected rgb, joint or joint+reg)"))
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || PvError::Input(format!("--size must look like 32x32, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Flag, then `POINTVID_SEED`, then the configured value.
fn resolve_seed(flag: Option<u64>, configured: u64) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(configured))
}

fn manifest(command: &str, config: impl Serialize, seed: u64, inputs: &[&Path], outputs: &[PathBuf]) -> RunManifest {
    let mut m = RunManifest::begin(command, config, seed);
    m.inputs = inputs.iter().map(|p| p.to_path_buf()).collect();
    m.outputs = outputs.to_vec();
    m
}

fn gen_data_cmd(a: GenDataArgs) -> Result<()> {
    let (height, width) = parse_size(&a.size)?;
    let opts = GenOptions { scenes: a.scenes, frames: a.frames, width, height, stride: a.stride, seed: resolve_seed(a.seed, 0)? };
    let m = RunManifest::begin("gen-data", opts, opts.seed);
    let dirs = gen_data(&opts, &a.out, a.jobs)?;
    eprintln!("wrote {} scenes to {}", dirs.len(), a.out.display());
    RunManifest { outputs: dirs, ..m }.finish(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct PrepResolved {
    sigma: f64,
    outlier_prob: f64,
    outlier_scale: f64,
    kalman: Option<KalmanSpec>,
    knn: usize,
    seed: u64,
}

fn prep_cmd(a: PrepArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    let mut kalman = KalmanSpec::default();
    if let Some(q) = a.kalman_q {
        kalman.process_var = q;
    }
    if let Some(r) = a.kalman_r {
        kalman.measure_var = r;
    }
    let settings = PrepSettings {
        noise: NoiseSpec { sigma: a.sigma, outlier_prob: a.outlier_prob, outlier_scale: a.outlier_scale, seed },
        kalman: (!a.no_smooth).then_some(kalman),
        knn: a.knn,
    };
    settings.noise.validate()?;
    if let Some(k) = &settings.kalman {
        k.validate()?;
    }
    let resolved = PrepResolved {
        sigma: a.sigma,
        outlier_prob: a.outlier_prob,
        outlier_scale: a.outlier_scale,
        kalman: settings.kalman,
        knn: a.knn,
        seed,
    };
    let m = manifest("prep", resolved, seed, &[&a.input], &[a.out.clone()]);
    let n = prep_all(&a.input, &a.out, &settings, a.jobs)?;
    eprintln!("prepared {n} scenes into {}", a.out.display());
    m.finish(&a.out)?;
    Ok(())
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.stage {
        c.stage = v;
    }
    if let Some(v) = &a.data {
        c.data = v.clone();
    }
    if let Some(v) = &a.eval_data {
        c.eval_data = Some(v.clone());
    }
    if let Some(v) = &a.out {
        c.out = v.clone();
    }
    if let Some(v) = a.iterations {
        c.iterations = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.cadence_k {
        c.weights.cadence_k = v;
    }
    if let Some(v) = a.eval_every {
        c.eval_every = v;
    }
    if let Some(v) = a.checkpoint_every {
        c.checkpoint_every = v;
    }
    c.calibrate_lambdas |= a.calibrate_lambdas;
    c.calibrate_c |= a.calibrate_c;
    c.seed = resolve_seed(a.seed, c.seed)?;
    c.validate()?;
    Ok(c)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let c = resolve_train_config(&a)?;
    let mut inputs: Vec<&Path> = vec![&c.data];
    if let Some(r) = &a.resume {
        inputs.push(r);
    }
    let mut outputs = vec![c.out.join(FINAL_CHECKPOINT), c.out.join(METRICS)];
    if (c.calibrate_lambdas || c.calibrate_c) && c.stage != Stage::Rgb {
        outputs.push(c.out.join(CALIBRATION));
    }
    let m = manifest("train", &c, c.seed, &inputs, &outputs);
    let run = run_training(&c, a.resume.as_deref())?;
    if let Some(last) = run.records.last() {
        eprintln!(
            "stage {} iterations {}..{}: final l_diff {:.6}",
            c.stage.name(),
            run.start_iteration,
            c.iterations,
            last.l_diff
        );
    }
    m.finish(&c.out)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ck = crate::checkpoint::load_checkpoint(&a.ckpt)?;
    let mut c = ck.meta.train.clone().unwrap_or_default();
    if let Some(n) = a.samples {
        c.eval.samples = n;
    }
    c.eval.seed = resolve_seed(a.seed, c.eval.seed)?;
    let m = manifest("eval", (&c.eval, &c.schedule, c.graph_k), c.eval.seed, &[&a.ckpt, &a.data], &[a.out.clone()]);
    let report = eval_checkpoint(&a.ckpt, &a.data, &c)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PvError::io(dir, e))?;
    }
    write_json(&report, &a.out)?;
    eprintln!("point_mse {:.6e} rigidity {:.6e} smoothness {:.6e}", report.point_mse, report.rigidity, report.smoothness);
    m.finish_at(&a.out.with_extension("manifest.json"))?;
    Ok(())
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let o = SampleOptions { steps: a.steps, seed: resolve_seed(a.seed, 0)?, frames: a.frames };
    let m = manifest(
        "sample",
        serde_json::json!({ "steps": o.steps, "seed": o.seed, "frames": o.frames }),
        o.seed,
        &[&a.ckpt, &a.cond],
        &[a.out.join(crate::dataset::JOINT)],
    );
    let path = sample(&a.ckpt, &a.cond, &a.out, &o)?;
    eprintln!("wrote {}", path.display());
    m.finish(&a.out)?;
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let mut inputs: Vec<&Path> = vec![&a.input];
    if let Some(s) = &a.scene {
        inputs.push(s);
    }
    let m = manifest("render", serde_json::json!({ "min_depth": a.min_depth }), 0, &inputs, &[]);
    let r = render(&a.input, &a.out, a.scene.as_deref(), a.min_depth)?;
    eprintln!("wrote {} frames and {} point clouds of {} points", r.frames.len(), r.clouds.len(), r.points_per_frame);
    RunManifest { outputs: r.frames.into_iter().chain(r.clouds).collect(), ..m }.finish(&a.out)?;
    Ok(())
}

fn ablation_cmd(a: AblationArgs) -> Result<()> {
    let mut c = match &a.config {
        Some(p) => AblationConfig::load(p)?,
        None => AblationConfig::default(),
    };
    if let Some(v) = a.out {
        c.out = v;
    }
    if let Some(v) = a.train_data {
        c.train_data = Some(v);
    }
    if let Some(v) = a.eval_data {
        c.eval_data = Some(v);
    }
    if let Some(v) = a.jobs {
        c.jobs = v;
    }
    c.seed = resolve_seed(a.seed, c.seed)?;
    let m = manifest("ablation", &c, c.seed, &[], &[c.out.join(crate::ablation::REPORT)]);
    let report = run_ablation(&c, |line| eprintln!("{line}"))?;
    for check in &report.checks {
        println!("{} {}: {:.6e} vs {:.6e}", if check.pass { "PASS" } else { "FAIL" }, check.name, check.lhs, check.rhs);
    }
    m.finish(&c.out)?;
    if !report.pass {
        return Err(PvError::Pipeline("ablation orderings not met".into()));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data_cmd(a),
        Command::Prep(a) => prep_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Ablation(a) => ablation_cmd(a),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
