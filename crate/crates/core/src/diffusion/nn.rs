//! Channel-last `f64` kernels with hand-written backward passes.
//!
//! Activations are `[T, H, W, C]`. Convolutions are 3x3, stride 1, zero
//! padded, and act on each frame independently. Weights are laid out
//! `[ky, kx, in, out]` so the innermost loop runs over output channels.

use alloc::vec;
use alloc::vec::Vec;

/// Spatial extent of one activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn pixels(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

#[inline]
fn tap_source(g: &Grid, r: usize, c: usize, ky: usize, kx: usize) -> Option<usize> {
    let rr = (r + ky).checked_sub(1)?;
    let cc = (c + kx).checked_sub(1)?;
    if rr >= g.height || cc >= g.width {
        return None;
    }
    Some(rr * g.width + cc)
}

pub fn conv3x3(g: &Grid, input: &[f64], cin: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    debug_assert_eq!(input.len(), g.pixels() * cin);
    debug_assert_eq!(weight.len(), 9 * cin * cout);
    let mut out = vec![0.0; g.pixels() * cout];
    let frame_px = g.tokens();
    for t in 0..g.frames {
        let fin = &input[t * frame_px * cin..(t + 1) * frame_px * cin];
        for r in 0..g.height {
            for c in 0..g.width {
                let o = ((t * g.height + r) * g.width + c) * cout;
                let acc = &mut out[o..o + cout];
                acc.copy_from_slice(bias);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let Some(src) = tap_source(g, r, c, ky, kx) else { continue };
                        let x = &fin[src * cin..(src + 1) * cin];
                        let wt = &weight[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                        for (ic, &xv) in x.iter().enumerate() {
                            let wr = &wt[ic * cout..(ic + 1) * cout];
                            for (a, &w) in acc.iter_mut().zip(wr) {
                                *a += w * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    g: &Grid,
    input: &[f64],
    cin: usize,
    weight: &[f64],
    cout: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let mut dinput = if want_input { vec![0.0; input.len()] } else { Vec::new() };
    let frame_px = g.tokens();
    for t in 0..g.frames {
        let base = t * frame_px;
        for r in 0..g.height {
            for c in 0..g.width {
                let o = ((t * g.height + r) * g.width + c) * cout;
                let d = &dout[o..o + cout];
                for (b, &dv) in dbias.iter_mut().zip(d) {
                    *b += dv;
                }
                for ky in 0..3 {
                    for kx in 0..3 {
                        let Some(src) = tap_source(g, r, c, ky, kx) else { continue };
                        let s = (base + src) * cin;
                        let tap = (ky * 3 + kx) * cin * cout;
                        for ic in 0..cin {
                            let xv = input[s + ic];
                            let row = tap + ic * cout;
                            let dw = &mut dweight[row..row + cout];
                            for (a, &dv) in dw.iter_mut().zip(d) {
                                *a += xv * dv;
                            }
                            if want_input {
                                let wr = &weight[row..row + cout];
                                let mut acc = 0.0;
                                for (&w, &dv) in wr.iter().zip(d) {
                                    acc += w * dv;
                                }
                                dinput[s + ic] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    want_input.then_some(dinput)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding `[sin(t f_0) .. sin(t f_{m-1}), cos(t f_0) .. cos(t f_{m-1})]`
/// with `f_k = 10000^(-k/m)` and `m = dim / 2`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let arg = t as f64 * freq;
        out[k] = libm::sin(arg);
        out[half + k] = libm::cos(arg);
    }
    out
}

/// `x @ w` for row-major `x: [n, a]` and `w: [a, b]`.
pub fn matmul(x: &[f64], n: usize, a: usize, w: &[f64], b: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    for i in 0..n {
        let o = &mut out[i * b..(i + 1) * b];
        for k in 0..a {
            let xv = x[i * a + k];
            for (acc, &wv) in o.iter_mut().zip(&w[k * b..(k + 1) * b]) {
                *acc += xv * wv;
            }
        }
    }
    out
}

/// Backward of [`matmul`]: accumulates `dw += x^T dy` and returns `dy @ w^T`.
pub fn matmul_backward(x: &[f64], n: usize, a: usize, w: &[f64], b: usize, dy: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * a];
    for i in 0..n {
        let d = &dy[i * b..(i + 1) * b];
        for k in 0..a {
            let xv = x[i * a + k];
            let row = &mut dw[k * b..(k + 1) * b];
            let mut acc = 0.0;
            for ((g, &dv), &wv) in row.iter_mut().zip(d).zip(&w[k * b..(k + 1) * b]) {
                *g += xv * dv;
                acc += wv * dv;
            }
            dx[i * a + k] = acc;
        }
    }
    dx
}

/// Projection matrices of one attention pass, each `[C, C]`.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights<'a> {
    pub q: &'a [f64],
    pub k: &'a [f64],
    pub v: &'a [f64],
    pub o: &'a [f64],
}

/// Gradients for one attention pass.
pub struct AttnGrads<'a> {
    pub q: &'a mut [f64],
    pub k: &'a mut [f64],
    pub v: &'a mut [f64],
    pub o: &'a mut [f64],
}

/// Intermediate values of one pass, kept for the backward pass. Attention
/// probabilities are recomputed row by row instead of stored.
#[derive(Debug, Clone)]
pub struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    mixed: Vec<f64>,
}

fn softmax_row(q: &[f64], keys: &[f64], dk: usize, ch: usize, head: usize, tokens: usize, scale: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for j in 0..tokens {
        let kj = &keys[j * ch + head * dk..j * ch + (head + 1) * dk];
        let mut s = 0.0;
        for (a, b) in q.iter().zip(kj) {
            s += a * b;
        }
        out[j] = s * scale;
        max = max.max(out[j]);
    }
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

/// One residual attention pass: `query_feat` attends to `context_feat` frame by
/// frame over spatial tokens; returns `query_feat + attn @ W_o`.
pub fn attention_pass(
    g: &Grid,
    query_feat: &[f64],
    context_feat: &[f64],
    ch: usize,
    heads: usize,
    w: AttnWeights<'_>,
) -> (Vec<f64>, AttnCache) {
    let n = g.pixels();
    let tokens = g.tokens();
    let dk = ch / heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let q = matmul(query_feat, n, ch, w.q, ch);
    let k = matmul(context_feat, n, ch, w.k, ch);
    let v = matmul(context_feat, n, ch, w.v, ch);
    let mut mixed = vec![0.0; n * ch];
    let mut probs = vec![0.0; tokens];
    for t in 0..g.frames {
        let off = t * tokens * ch;
        let (qf, kf, vf) = (&q[off..off + tokens * ch], &k[off..off + tokens * ch], &v[off..off + tokens * ch]);
        for h in 0..heads {
            for i in 0..tokens {
                softmax_row(&qf[i * ch + h * dk..i * ch + (h + 1) * dk], kf, dk, ch, h, tokens, scale, &mut probs);
                let out = &mut mixed[off + i * ch + h * dk..off + i * ch + (h + 1) * dk];
                for (j, &a) in probs.iter().enumerate() {
                    for (o, &vv) in out.iter_mut().zip(&vf[j * ch + h * dk..j * ch + (h + 1) * dk]) {
                        *o += a * vv;
                    }
                }
            }
        }
    }
    let update = matmul(&mixed, n, ch, w.o, ch);
    let out = query_feat.iter().zip(&update).map(|(a, b)| a + b).collect();
    (out, AttnCache { q, k, v, mixed })
}

/// Backward of [`attention_pass`]. Returns `(d query_feat, d context_feat)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_pass_backward(
    g: &Grid,
    query_feat: &[f64],
    context_feat: &[f64],
    ch: usize,
    heads: usize,
    w: AttnWeights<'_>,
    cache: &AttnCache,
    dout: &[f64],
    grads: AttnGrads<'_>,
) -> (Vec<f64>, Vec<f64>) {
    let n = g.pixels();
    let tokens = g.tokens();
    let dk = ch / heads;
    let scale = 1.0 / libm::sqrt(dk as f64);
    let dmixed = matmul_backward(&cache.mixed, n, ch, w.o, ch, dout, grads.o);
    let mut dq = vec![0.0; n * ch];
    let mut dkm = vec![0.0; n * ch];
    let mut dv = vec![0.0; n * ch];
    let mut probs = vec![0.0; tokens];
    let mut dprobs = vec![0.0; tokens];
    for t in 0..g.frames {
        let off = t * tokens * ch;
        let qf = &cache.q[off..off + tokens * ch];
        let kf = &cache.k[off..off + tokens * ch];
        let vf = &cache.v[off..off + tokens * ch];
        for h in 0..heads {
            let hs = h * dk;
            for i in 0..tokens {
                let qi = &qf[i * ch + hs..i * ch + hs + dk];
                softmax_row(qi, kf, dk, ch, h, tokens, scale, &mut probs);
                let dmi = &dmixed[off + i * ch + hs..off + i * ch + hs + dk];
                let mut dot = 0.0;
                for j in 0..tokens {
                    let vj = &vf[j * ch + hs..j * ch + hs + dk];
                    let mut s = 0.0;
                    for (a, b) in dmi.iter().zip(vj) {
                        s += a * b;
                    }
                    dprobs[j] = s;
                    dot += probs[j] * s;
                    let dvj = &mut dv[off + j * ch + hs..off + j * ch + hs + dk];
                    for (d, &m) in dvj.iter_mut().zip(dmi) {
                        *d += probs[j] * m;
                    }
                }
                for j in 0..tokens {
                    let ds = probs[j] * (dprobs[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kf[j * ch + hs..j * ch + hs + dk];
                    let dqi = &mut dq[off + i * ch + hs..off + i * ch + hs + dk];
                    for (d, &kv) in dqi.iter_mut().zip(kj) {
                        *d += ds * kv;
                    }
                    let dkj = &mut dkm[off + j * ch + hs..off + j * ch + hs + dk];
                    for (d, &qv) in dkj.iter_mut().zip(qi) {
                        *d += ds * qv;
                    }
                }
            }
        }
    }
    let mut dquery = matmul_backward(query_feat, n, ch, w.q, ch, &dq, grads.q);
    for (a, b) in dquery.iter_mut().zip(dout) {
        *a += b;
    }
    let dctx_k = matmul_backward(context_feat, n, ch, w.k, ch, &dkm, grads.k);
    let dctx_v = matmul_backward(context_feat, n, ch, w.v, ch, &dv, grads.v);
    let dcontext = dctx_k.iter().zip(&dctx_v).map(|(a, b)| a + b).collect();
    (dquery, dcontext)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomreg::fd_gradient;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn conv_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let g = Grid { frames: 2, height: 4, width: 5 };
        let (cin, cout) = (3, 4);
        let x = rand_vec(&mut rng, g.pixels() * cin);
        let w = rand_vec(&mut rng, 9 * cin * cout);
        let b = rand_vec(&mut rng, cout);
        let probe = rand_vec(&mut rng, g.pixels() * cout);
        let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            conv3x3(&g, x, cin, w, b, cout).iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        let dx = conv3x3_backward(&g, &x, cin, &w, cout, &probe, &mut dw, &mut db, true).unwrap();
        let fx = fd_gradient(|v| loss(v, &w, &b), &x, 1e-5);
        let fw = fd_gradient(|v| loss(&x, v, &b), &w, 1e-5);
        let fb = fd_gradient(|v| loss(&x, &w, v), &b, 1e-5);
        for (a, n) in dx.iter().zip(&fx).chain(dw.iter().zip(&fw)).chain(db.iter().zip(&fb)) {
            assert!(rel_err(*a, *n) < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = Grid { frames: 2, height: 2, width: 3 };
        let (ch, heads) = (4, 2);
        let n = g.pixels() * ch;
        let qf = rand_vec(&mut rng, n);
        let cf = rand_vec(&mut rng, n);
        let ws: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, ch * ch)).collect();
        let probe = rand_vec(&mut rng, n);
        let run = |qf: &[f64], cf: &[f64], ws: &[&[f64]]| -> f64 {
            let w = AttnWeights { q: ws[0], k: ws[1], v: ws[2], o: ws[3] };
            attention_pass(&g, qf, cf, ch, heads, w).0.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let wr: Vec<&[f64]> = ws.iter().map(|v| v.as_slice()).collect();
        let w = AttnWeights { q: wr[0], k: wr[1], v: wr[2], o: wr[3] };
        let (_, cache) = attention_pass(&g, &qf, &cf, ch, heads, w);
        let mut gw: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0; ch * ch]).collect();
        let [g0, g1, g2, g3] = &mut gw[..] else { unreachable!() };
        let grads = AttnGrads { q: g0, k: g1, v: g2, o: g3 };
        let (dq, dc) = attention_pass_backward(&g, &qf, &cf, ch, heads, w, &cache, &probe, grads);
        let fq = fd_gradient(|v| run(v, &cf, &wr), &qf, 1e-5);
        let fc = fd_gradient(|v| run(&qf, v, &wr), &cf, 1e-5);
        for (a, b) in dq.iter().zip(&fq).chain(dc.iter().zip(&fc)) {
            assert!(rel_err(*a, *b) < 1e-6, "{a} vs {b}");
        }
        for m in 0..4 {
            let fw = fd_gradient(
                |v| {
                    let mut all = wr.clone();
                    all[m] = v;
                    run(&qf, &cf, &all)
                },
                &ws[m],
                1e-5,
            );
            for (a, b) in gw[m].iter().zip(&fw) {
                assert!(rel_err(*a, *b) < 1e-6, "matrix {m}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn silu_derivative() {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn embedding_shape() {
        let e = timestep_embedding(0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
