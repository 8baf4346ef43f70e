use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::diffusion::{augment_channels, make_schedule, DenoiserConfig, OracleEps};
use crate::pipeline::{generate_scene, prepare, PrepSettings};

fn samples(n: usize, channels: usize) -> Vec<TrainSample> {
    (0..n as u64)
        .map(|seed| {
            let g = generate_scene(100 + seed, 4, 16, 16, 2).unwrap();
            let p = prepare(&g.video, &g.tracks, &g.mask, &g.spec.camera, &PrepSettings::default()).unwrap();
            TrainSample::from_joint(&p.joint, &g.mask, g.spec.camera, channels).unwrap()
        })
        .collect()
}

fn joint_model() -> DenoiserParams {
    let rgb = DenoiserParams::init(DenoiserConfig::rgb(6, 1, 8), 1).unwrap();
    augment_channels(&rgb, false, 1).unwrap()
}

fn settings(stage: Stage) -> StepSettings {
    StepSettings {
        stage,
        learning_rate: 1e-3,
        weights: LossWeights::default(),
        recovery_steps: 4,
        graph_k: 4,
        seed: 9,
        max_grad_norm: None,
    }
}

#[test]
fn cadence_marks_every_fifth_iteration() {
    let data = samples(1, 6);
    let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let mut m = joint_model();
    let mut opt = Optimizer::new(OptimizerKind::default(), m.len()).unwrap();
    let s = settings(Stage::JointReg);
    for it in 0..11u64 {
        let r = train_step(&mut m, &mut opt, &[&data[0]], &s, &sched, it).unwrap();
        assert_eq!(r.l_recon.is_some(), it % 5 == 0, "iteration {it}");
        assert_eq!(r.l_rigid.is_some(), it % 5 == 0);
        if let Some(v) = r.l_recon {
            assert!(v > 0.0);
        }
    }
}

#[test]
fn zero_lambdas_reproduce_plain_training() {
    let data = samples(1, 6);
    let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let run = |stage: Stage| {
        let mut s = settings(stage);
        s.weights.lambda_recon = 0.0;
        s.weights.lambda_rigid = 0.0;
        let mut m = joint_model();
        let mut opt = Optimizer::new(OptimizerKind::default(), m.len()).unwrap();
        let diffs: Vec<f64> = (0..6).map(|it| train_step(&mut m, &mut opt, &[&data[0]], &s, &sched, it).unwrap().l_diff).collect();
        (m, diffs)
    };
    let (a, da) = run(Stage::Joint);
    let (b, db) = run(Stage::JointReg);
    assert_eq!(da, db);
    assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn lambda_rule() {
    let b = lambdas_from_means([0.5, 5.0, 0.05]);
    assert!((b.weights[0] - 1.0).abs() < 1e-15 && (b.weights[1] - 0.1).abs() < 1e-15 && (b.weights[2] - 10.0).abs() < 1e-12);
    assert_eq!(lambdas_from_means([0.3; 3]).weights, [1.0; 3]);
    let z = lambdas_from_means([0.3, 0.2, 0.0]);
    assert_eq!(z.weights[2], 0.0);
    assert_eq!(z.warnings.len(), 1);
}

#[test]
fn calibration_needs_samples() {
    let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
    assert!(calibrate_lambdas(&joint_model(), &[], &settings(Stage::JointReg), &sched).is_err());
    let data = samples(2, 6);
    let refs: Vec<&TrainSample> = data.iter().collect();
    let (w, _) = calibrate_lambdas(&joint_model(), &refs, &settings(Stage::JointReg), &sched).unwrap();
    assert_eq!(w.lambda_diff, 1.0);
    assert!(w.lambda_recon > 0.0 && w.lambda_rigid > 0.0);
}

#[test]
fn oracle_eval_is_exact() {
    let data = samples(2, 6);
    let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let proto = EvalProtocol::default();
    for (k, s) in data.iter().enumerate() {
        let e = evaluate_sample(&OracleEps { z0: &s.z0, sched: &sched }, s, &sched, &proto, k as u64).unwrap();
        assert!(e.point_mse < 1e-6, "{}", e.point_mse);
    }
}

#[test]
fn untrained_point_channels_leave_only_scaled_noise() {
    // With zero point-channel predictions DDIM returns z_t / sqrt(ab_t) on those
    // channels, so the storage-range error is 0.5 * sqrt((1 - ab) / ab) * eps.
    let data = samples(2, 6);
    let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let proto = EvalProtocol::default();
    let m = joint_model();
    let (mse, per) = eval_point_mse(&m, &[&data[0], &data[1]], 2, &sched, &proto).unwrap();
    let ab = sched.alpha_bar(proto.t);
    let mut want = 0.0;
    for (k, s) in data.iter().enumerate() {
        let eps = draw_noise(&mut item_rng(proto.seed, u64::MAX, k as u64), s.z0.len());
        let mut se = 0.0;
        let mut n = 0;
        for t in 0..s.grid.frames {
            for &px in &s.pixels {
                let o = s.point_index(t, px);
                for a in 0..3 {
                    let d = 0.5 * libm::sqrt((1.0 - ab) / ab) * eps[o + a];
                    se += d * d;
                    n += 1;
                }
            }
        }
        let e = se / n as f64;
        assert!((per[k].point_mse - e).abs() <= 1e-9 * e, "{} vs {e}", per[k].point_mse);
        want += e / 2.0;
    }
    assert!((mse - want).abs() <= 1e-9 * want);
    assert!(eval_point_mse(&m, &[], 2, &sched, &proto).is_err());
}

#[test]
fn rgb_stage_learns() {
    let data = samples(4, 3);
    let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let mut m = DenoiserParams::init(DenoiserConfig::rgb(8, 1, 8), 3).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::default(), m.len()).unwrap();
    let mut s = settings(Stage::Rgb);
    s.learning_rate = 3e-3;
    let losses: Vec<f64> = (0..200u64)
        .map(|it| train_step(&mut m, &mut opt, &[&data[(it % 4) as usize]], &s, &sched, it).unwrap().l_diff)
        .collect();
    let head = losses[..50].iter().sum::<f64>() / 50.0;
    let tail = losses[150..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn stage_mismatch_is_a_layout_error() {
    let data = samples(1, 3);
    let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let mut m = joint_model();
    let mut opt = Optimizer::new(OptimizerKind::default(), m.len()).unwrap();
    let r = train_step(&mut m, &mut opt, &[&data[0]], &settings(Stage::Joint), &sched, 0);
    assert!(matches!(r, Err(Error::Layout { .. })));
    let _ = vec![0u8];
}

#[test]
fn diverged_recovery_stays_bounded() {
    let data = samples(1, 6);
    let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let mut m = joint_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in m.values_mut() {
        *v = rng.random_range(-30.0f32..30.0);
    }
    let s = settings(Stage::JointReg);
    let [_, recon, rigid] = measure_losses(&m, &data[0], &s, &sched, 0).unwrap();
    // Clamped storage coordinates keep every point inside the camera frustum.
    let far = data[0].camera.far;
    let span = 3.0 * (far * far * 4.0);
    let d = &data[0];
    assert!(recon.is_finite() && recon <= 4.0 * span.sqrt() * d.grid.frames as f64, "recon {recon}");
    let edges = (d.pixels.len() * s.graph_k) as f64;
    assert!(rigid.is_finite() && rigid <= edges * span * d.grid.frames as f64, "rigid {rigid}");
    let mut opt = Optimizer::new(OptimizerKind::default(), m.len()).unwrap();
    assert!(train_step(&mut m, &mut opt, &[&data[0]], &s, &sched, 0).is_ok());
}

#[test]
fn recon_weights_equalize_terms_on_recoveries() {
    let data = samples(2, 6);
    let refs: Vec<&TrainSample> = data.iter().collect();
    let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
    let s = settings(Stage::JointReg);
    let m = joint_model();
    let (w, warnings) = calibrate_recon_weights(&m, &refs, &s, &sched).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(w.c0, 1.0);
    assert_eq!((w.lambda_recon, w.lambda_rigid), (s.weights.lambda_recon, s.weights.lambda_rigid));
    let mut means = [0.0; 3];
    for (k, d) in data.iter().enumerate() {
        let p = recover_points(&m, d, &s, &sched, k as u64).unwrap();
        let t = crate::geomreg::recon_terms(&p, &d.gt_world).unwrap();
        for a in 0..3 {
            means[a] += t[a] / 2.0;
        }
    }
    let c = [w.c0, w.c1, w.c2];
    for a in 1..3 {
        assert!((c[a] * means[a] - means[0]).abs() <= 1e-9 * means[0], "{a}: {} vs {}", c[a] * means[a], means[0]);
    }
}
