//! Geometric losses against plain-loop oracles, finite differences and
//! closed forms.

use pointvid_core::geomreg::{
    build_neighbor_graph, fd_gradient_oracle, recon_loss, rigid_loss, LossWeights, NeighborGraph, PointBatch,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, frames: usize, n: usize, scale: f64) -> PointBatch {
    let v = (0..frames * n).map(|_| [0.0; 3].map(|_: f64| rng.random_range(-scale..scale))).collect();
    PointBatch::new(frames, n, v).unwrap()
}

fn oracle_recon(pred: &PointBatch, gt: &PointBatch, c: [f64; 3]) -> f64 {
    let (t_n, n) = (pred.frames(), pred.points());
    let p = |t: usize, i: usize, a: usize| pred.get(t, i)[a];
    let q = |t: usize, i: usize, a: usize| gt.get(t, i)[a];
    let mut terms = [0.0f64; 3];
    for t in 0..t_n {
        let mut frame = [0.0f64; 3];
        for i in 0..n {
            let mut s = [0.0f64; 3];
            for a in 0..3 {
                let e0 = p(t, i, a) - q(t, i, a);
                s[0] += e0 * e0;
                if t >= 1 {
                    let e1 = p(t, i, a) - p(t - 1, i, a);
                    s[1] += e1 * e1;
                }
                if t >= 2 {
                    let e2 = p(t, i, a) - 2.0 * p(t - 1, i, a) + p(t - 2, i, a);
                    s[2] += e2 * e2;
                }
            }
            for k in 0..3 {
                frame[k] += s[k].sqrt();
            }
        }
        for k in 0..3 {
            if t >= k {
                terms[k] += frame[k] / n as f64;
            }
        }
    }
    c[0] * terms[0] + c[1] * terms[1] + c[2] * terms[2]
}

fn oracle_rigid(pred: &PointBatch, g: &NeighborGraph) -> f64 {
    let mut total = 0.0;
    for t in 1..pred.frames() {
        for (k, &(i, j)) in g.pairs.iter().enumerate() {
            let mut d2 = 0.0;
            for a in 0..3 {
                let d = pred.get(t, i)[a] - pred.get(t, j)[a];
                d2 += d * d;
            }
            let dev = d2.sqrt() - g.rest_dist[k];
            total += dev * dev;
        }
    }
    total
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn losses_match_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100 {
        let frames = rng.random_range(1..=8);
        let n = rng.random_range(2..=64);
        let pred = random_batch(&mut rng, frames, n, 3.0);
        let gt = random_batch(&mut rng, frames, n, 3.0);
        let w = LossWeights { c0: rng.random_range(0.1..2.0), c1: rng.random_range(0.1..2.0), c2: rng.random_range(0.1..2.0), ..Default::default() };
        let (l, _) = recon_loss(&pred, &gt, &w).unwrap();
        assert!(rel(l, oracle_recon(&pred, &gt, w.c())) <= 1e-12);
        let g = build_neighbor_graph(pred.frame(0), rng.random_range(1..n.min(9))).unwrap();
        let (r, _) = rigid_loss(&pred, &g).unwrap();
        let o = oracle_rigid(&pred, &g);
        assert!(r == o || rel(r, o) <= 1e-12, "{r} vs {o}");
    }
}

#[test]
fn loss_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = LossWeights { c0: 1.0, c1: 0.7, c2: 0.3, ..Default::default() };
    for _ in 0..10 {
        let (frames, n) = (rng.random_range(3..=6), rng.random_range(4..=12));
        // Distinct random clouds keep every residual norm away from zero.
        let pred = random_batch(&mut rng, frames, n, 2.0);
        let gt = random_batch(&mut rng, frames, n, 2.0);
        let (_, an) = recon_loss(&pred, &gt, &w).unwrap();
        let fd = fd_gradient_oracle(|p| recon_loss(p, &gt, &w).unwrap().0, &pred, 1e-5).unwrap();
        let an: Vec<f64> = an.iter().flatten().copied().collect();
        let worst = an.iter().zip(&fd).map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-3)).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "recon worst {worst}");

        let g = build_neighbor_graph(random_batch(&mut rng, 1, n, 2.0).frame(0), 3).unwrap();
        let (_, an) = rigid_loss(&pred, &g).unwrap();
        let fd = fd_gradient_oracle(|p| rigid_loss(p, &g).unwrap().0, &pred, 1e-5).unwrap();
        let an: Vec<f64> = an.iter().flatten().copied().collect();
        let worst = an.iter().zip(&fd).map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-3)).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "rigid worst {worst}");
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = [0.0; 4].map(|_: f64| rng.random_range(-1.0..1.0));
    let s = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / s);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

#[test]
fn rigidity_is_isometry_invariant_and_scales_quadratically() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..50 {
        let (frames, n) = (rng.random_range(2..=8), rng.random_range(5..=40));
        let p0 = random_batch(&mut rng, 1, n, 1.0);
        let g = build_neighbor_graph(p0.frame(0), 4).unwrap();
        let mut moved = Vec::new();
        for t in 0..frames {
            let r = random_rotation(&mut rng);
            let tr: [f64; 3] = [0.0; 3].map(|_: f64| rng.random_range(-5.0..5.0));
            for p in p0.frame(0) {
                let x = if t == 0 { *p } else { [0, 1, 2].map(|a| r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2] + tr[a]) };
                moved.push(x);
            }
        }
        let (l, _) = rigid_loss(&PointBatch::new(frames, n, moved).unwrap(), &g).unwrap();
        assert!(l <= 1e-9, "isometry loss {l}");

        for s in [0.5, 2.0] {
            let scaled: Vec<[f64; 3]> =
                (0..frames).flat_map(|t| p0.frame(0).iter().map(move |p| if t == 0 { *p } else { p.map(|v| v * s) })).collect();
            let (l, _) = rigid_loss(&PointBatch::new(frames, n, scaled).unwrap(), &g).unwrap();
            let closed: f64 = (frames - 1) as f64 * g.rest_dist.iter().map(|d| (s - 1.0) * (s - 1.0) * d * d).sum::<f64>();
            assert!(rel(l, closed) <= 1e-9, "{l} vs {closed}");
        }
    }
}
