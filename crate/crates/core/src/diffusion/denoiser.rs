//! Small per-frame convolutional noise predictor.
//!
//! ```text
//! x   = [z_t | cond repeated per half]            (in + cond channels)
//! a   = conv_in(x)                                 (halves * Ch)
//! h0  = a                        (RGB model)
//! h0  = xattn(v, p).sum()        (joint model, v/p are the halves of a)
//! h0 += time.w^T sinusoid(t) + time.b
//! h_{l+1} = h_l + block_l(silu(h_l))
//! eps = conv_out(silu(h_L))
//! ```
//!
//! All arithmetic is `f64`; parameters are stored as `f32`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ddim::EpsModel;
use super::layout::Layout;
use super::nn::{
    attention_pass, attention_pass_backward, conv3x3, conv3x3_backward, matmul, silu, silu_grad, timestep_embedding,
    AttnCache, AttnGrads, AttnWeights, Grid,
};
use crate::error::{shape_err, Error, Result};

pub const RGB_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub cond_channels: usize,
    pub use_cross_attention: bool,
    pub attention_heads: usize,
    /// 0, or 2 to append normalized pixel `(x, y)` to the input.
    #[cfg_attr(feature = "serde", serde(default))]
    pub coord_channels: usize,
}

impl DenoiserConfig {
    pub fn rgb(hidden_channels: usize, depth: usize, time_embed_dim: usize) -> Self {
        Self {
            in_channels: 3,
            hidden_channels,
            depth,
            time_embed_dim,
            cond_channels: 3,
            use_cross_attention: false,
            attention_heads: 1,
            coord_channels: 0,
        }
    }

    pub fn with_coords(self, on: bool) -> Self {
        Self { coord_channels: if on { 2 } else { 0 }, ..self }
    }

    /// Channels seen by `conv_in`: noisy input, repeated condition, coordinates.
    pub fn input_channels(&self) -> usize {
        self.in_channels + self.cond_channels + self.coord_channels
    }

    /// Number of 3-channel modalities (1 for RGB, 2 for RGB + points).
    pub fn halves(&self) -> usize {
        self.in_channels / RGB_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Param(format!("denoiser config: {m}")));
        if self.hidden_channels == 0 || self.depth == 0 || self.time_embed_dim == 0 || self.attention_heads == 0 {
            return bad("all extents must be positive");
        }
        if self.in_channels != 3 && self.in_channels != 6 {
            return bad("in_channels must be 3 or 6");
        }
        if self.cond_channels != self.in_channels {
            return bad("cond_channels must equal in_channels (the condition frame is repeated per half)");
        }
        if self.coord_channels != 0 && self.coord_channels != 2 {
            return bad("coord_channels must be 0 or 2");
        }
        if self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even");
        }
        if self.use_cross_attention {
            if self.halves() != 2 {
                return bad("cross-attention needs the joint 6-channel model");
            }
            if self.hidden_channels % self.attention_heads != 0 {
                return bad("hidden_channels must be divisible by attention_heads");
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let (ch, e) = (self.hidden_channels, self.time_embed_dim);
        let cin = self.input_channels();
        let mut l = Layout::default();
        l.push("conv_in.w", &[3, 3, cin, ch * self.halves()]);
        l.push("conv_in.b", &[ch * self.halves()]);
        l.push("time.w", &[e, ch]);
        l.push("time.b", &[ch]);
        if self.use_cross_attention {
            for pass in ["attn1", "attn2"] {
                for m in ["q", "k", "v", "o"] {
                    l.push(format!("{pass}.{m}"), &[ch, ch]);
                }
            }
        }
        for b in 0..self.depth {
            l.push(format!("block{b}.w"), &[3, 3, ch, ch]);
            l.push(format!("block{b}.b"), &[ch]);
        }
        l.push("conv_out.w", &[3, 3, ch, self.in_channels]);
        l.push("conv_out.b", &[self.in_channels]);
        l
    }
}

/// Flat `f32` parameters plus the layout that names them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    layout: Layout,
    values: Vec<f32>,
}

impl DenoiserParams {
    pub fn new(config: DenoiserConfig, values: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if values.len() != layout.total() {
            return Err(Error::Layout {
                expected: format!("{} values", layout.total()),
                found: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(Self { config, layout, values })
    }

    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let n = config.layout().total();
        Self::new(config, vec![0.0; n])
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases, zero attention output
    /// projections.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in p.layout.layers.clone() {
            if spec.name.ends_with(".b") || spec.name.ends_with(".o") {
                continue;
            }
            let fan_in: usize = spec.shape[..spec.shape.len() - 1].iter().product();
            let bound = 1.0 / libm::sqrtf(fan_in as f32);
            for v in &mut p.values[spec.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Replaces the values, keeping config and layout.
    pub fn set_values(&mut self, values: Vec<f32>) -> Result<()> {
        let next = Self::new(self.config, values)?;
        *self = next;
        Ok(())
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    /// `eps_hat` for one video. `z_t` is `[T, H, W, in]` and `cond` is the
    /// `[H, W, 3]` conditioning frame, both in diffusion range.
    pub fn forward(&self, grid: Grid, z_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>> {
        let p = self.to_f64();
        Ok(forward(&self.config, &self.layout, &p, grid, z_t, t, cond)?.0)
    }
}

/// Binds a model to a conditioning frame so it can drive DDIM sampling.
pub struct Conditioned<'a> {
    pub config: &'a DenoiserConfig,
    pub layout: &'a Layout,
    pub params: &'a [f64],
    pub grid: Grid,
    pub cond: &'a [f64],
}

impl<'a> Conditioned<'a> {
    pub fn new(model: &'a DenoiserParams, params: &'a [f64], grid: Grid, cond: &'a [f64]) -> Self {
        Self { config: &model.config, layout: &model.layout, params, grid, cond }
    }
}

impl EpsModel for Conditioned<'_> {
    fn predict_eps(&self, z_t: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(forward(self.config, self.layout, self.params, self.grid, z_t, t, self.cond)?.0)
    }
}

#[derive(Debug, Clone)]
struct AttnState {
    v: Vec<f64>,
    p: Vec<f64>,
    v1: Vec<f64>,
    pass1: AttnCache,
    pass2: AttnCache,
}

/// Activations kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    grid: Grid,
    x: Vec<f64>,
    emb: Vec<f64>,
    attn: Option<AttnState>,
    /// `h_0 ..= h_depth`
    hs: Vec<Vec<f64>>,
    /// `silu(h_l)` for the same range.
    acts: Vec<Vec<f64>>,
}

fn split_halves(a: &[f64], ch: usize) -> (Vec<f64>, Vec<f64>) {
    let n = a.len() / (2 * ch);
    let mut v = Vec::with_capacity(n * ch);
    let mut p = Vec::with_capacity(n * ch);
    for px in a.chunks_exact(2 * ch) {
        v.extend_from_slice(&px[..ch]);
        p.extend_from_slice(&px[ch..]);
    }
    (v, p)
}

fn attn_weights<'a>(layout: &Layout, p: &'a [f64], pass: &str) -> AttnWeights<'a> {
    let get = |m: &str| &p[layout.range(&format!("{pass}.{m}"))];
    AttnWeights { q: get("q"), k: get("k"), v: get("v"), o: get("o") }
}

fn check_inputs(cfg: &DenoiserConfig, layout: &Layout, p: &[f64], grid: &Grid, z_t: &[f64], cond: &[f64]) -> Result<()> {
    if p.len() != layout.total() {
        return Err(Error::Layout { expected: format!("{} values", layout.total()), found: format!("{}", p.len()) });
    }
    if z_t.len() != grid.pixels() * cfg.in_channels {
        return Err(shape_err(
            &[grid.frames, grid.height, grid.width, cfg.in_channels],
            &[z_t.len() / (grid.pixels().max(1)), z_t.len() % grid.pixels().max(1)],
        ));
    }
    if cond.len() != grid.tokens() * RGB_CHANNELS {
        return Err(shape_err(&[grid.height, grid.width, RGB_CHANNELS], &[cond.len()]));
    }
    Ok(())
}

/// Forward pass on explicit `f64` parameters.
pub fn forward(
    cfg: &DenoiserConfig,
    layout: &Layout,
    p: &[f64],
    grid: Grid,
    z_t: &[f64],
    t: usize,
    cond: &[f64],
) -> Result<(Vec<f64>, ForwardCache)> {
    check_inputs(cfg, layout, p, &grid, z_t, cond)?;
    let ch = cfg.hidden_channels;
    let cin = cfg.input_channels();
    let param = |name: &str| &p[layout.range(name)];

    let mut x = Vec::with_capacity(grid.pixels() * cin);
    for (i, z) in z_t.chunks_exact(cfg.in_channels).enumerate() {
        x.extend_from_slice(z);
        let px = i % grid.tokens();
        for _ in 0..cfg.halves() {
            x.extend_from_slice(&cond[px * RGB_CHANNELS..(px + 1) * RGB_CHANNELS]);
        }
        if cfg.coord_channels == 2 {
            let (r, c) = (px / grid.width, px % grid.width);
            x.push(2.0 * (c as f64 + 0.5) / grid.width as f64 - 1.0);
            x.push(2.0 * (r as f64 + 0.5) / grid.height as f64 - 1.0);
        }
    }
    let a = conv3x3(&grid, &x, cin, param("conv_in.w"), param("conv_in.b"), ch * cfg.halves());

    let (mut h, attn) = if cfg.halves() == 1 {
        (a, None)
    } else {
        let (v, pt) = split_halves(&a, ch);
        if cfg.use_cross_attention {
            let heads = cfg.attention_heads;
            let (v1, pass1) = attention_pass(&grid, &v, &pt, ch, heads, attn_weights(layout, p, "attn1"));
            let (p1, pass2) = attention_pass(&grid, &pt, &v1, ch, heads, attn_weights(layout, p, "attn2"));
            let h = v1.iter().zip(&p1).map(|(a, b)| a + b).collect();
            (h, Some(AttnState { v, p: pt, v1, pass1, pass2 }))
        } else {
            (v.iter().zip(&pt).map(|(a, b)| a + b).collect(), None)
        }
    };

    let emb = timestep_embedding(t, cfg.time_embed_dim);
    let mut temb = matmul(&emb, 1, cfg.time_embed_dim, param("time.w"), ch);
    for (a, b) in temb.iter_mut().zip(param("time.b")) {
        *a += b;
    }
    for px in h.chunks_exact_mut(ch) {
        for (a, b) in px.iter_mut().zip(&temb) {
            *a += b;
        }
    }

    let mut hs = Vec::with_capacity(cfg.depth + 1);
    let mut acts = Vec::with_capacity(cfg.depth + 1);
    for b in 0..cfg.depth {
        let s: Vec<f64> = h.iter().map(|&v| silu(v)).collect();
        let r = conv3x3(&grid, &s, ch, param(&format!("block{b}.w")), param(&format!("block{b}.b")), ch);
        let next = h.iter().zip(&r).map(|(a, b)| a + b).collect();
        hs.push(core::mem::replace(&mut h, next));
        acts.push(s);
    }
    let s: Vec<f64> = h.iter().map(|&v| silu(v)).collect();
    let out = conv3x3(&grid, &s, ch, param("conv_out.w"), param("conv_out.b"), cfg.in_channels);
    hs.push(h);
    acts.push(s);
    Ok((out, ForwardCache { grid, x, emb, attn, hs, acts }))
}

/// Gradient of `sum(d_out * eps_hat)` with respect to every parameter.
pub fn backward(cfg: &DenoiserConfig, layout: &Layout, p: &[f64], cache: &ForwardCache, d_out: &[f64]) -> Result<Vec<f64>> {
    let grid = cache.grid;
    if d_out.len() != grid.pixels() * cfg.in_channels {
        return Err(shape_err(&[grid.pixels() * cfg.in_channels], &[d_out.len()]));
    }
    let ch = cfg.hidden_channels;
    let cin = cfg.input_channels();
    let mut g = vec![0.0; layout.total()];
    let param = |name: &str| &p[layout.range(name)];

    let ds = {
        let (gw, gb) = two_mut(&mut g, layout.range("conv_out.w"), layout.range("conv_out.b"));
        let acts = &cache.acts[cfg.depth];
        conv3x3_backward(&grid, acts, ch, param("conv_out.w"), cfg.in_channels, d_out, gw, gb, true).expect("input grad")
    };
    let mut dh: Vec<f64> = ds.iter().zip(&cache.hs[cfg.depth]).map(|(d, &h)| d * silu_grad(h)).collect();
    for b in (0..cfg.depth).rev() {
        let (wn, bn) = (format!("block{b}.w"), format!("block{b}.b"));
        let (gw, gb) = two_mut(&mut g, layout.range(&wn), layout.range(&bn));
        let ds = conv3x3_backward(&grid, &cache.acts[b], ch, param(&wn), ch, &dh, gw, gb, true).expect("input grad");
        for ((d, s), &h) in dh.iter_mut().zip(&ds).zip(&cache.hs[b]) {
            *d += s * silu_grad(h);
        }
    }

    let mut dtemb = vec![0.0; ch];
    for px in dh.chunks_exact(ch) {
        for (a, b) in dtemb.iter_mut().zip(px) {
            *a += b;
        }
    }
    {
        let (gw, gb) = two_mut(&mut g, layout.range("time.w"), layout.range("time.b"));
        for (e, &ev) in cache.emb.iter().enumerate() {
            for (c, &d) in dtemb.iter().enumerate() {
                gw[e * ch + c] += ev * d;
            }
        }
        for (a, b) in gb.iter_mut().zip(&dtemb) {
            *a += b;
        }
    }

    let da = if cfg.halves() == 1 {
        dh
    } else {
        let (dv, dp) = match &cache.attn {
            None => (dh.clone(), dh),
            Some(st) => {
                let heads = cfg.attention_heads;
                let w2 = attn_weights(layout, p, "attn2");
                let (dp, dv1_ctx) = {
                    let grads = attn_grads(&mut g, layout, "attn2");
                    attention_pass_backward(&grid, &st.p, &st.v1, ch, heads, w2, &st.pass2, &dh, grads)
                };
                let dv1: Vec<f64> = dh.iter().zip(&dv1_ctx).map(|(a, b)| a + b).collect();
                let w1 = attn_weights(layout, p, "attn1");
                let (dv, dp_ctx) = {
                    let grads = attn_grads(&mut g, layout, "attn1");
                    attention_pass_backward(&grid, &st.v, &st.p, ch, heads, w1, &st.pass1, &dv1, grads)
                };
                (dv, dp.iter().zip(&dp_ctx).map(|(a, b)| a + b).collect())
            }
        };
        let mut da = Vec::with_capacity(dv.len() * 2);
        for (v, q) in dv.chunks_exact(ch).zip(dp.chunks_exact(ch)) {
            da.extend_from_slice(v);
            da.extend_from_slice(q);
        }
        da
    };
    let (gw, gb) = two_mut(&mut g, layout.range("conv_in.w"), layout.range("conv_in.b"));
    conv3x3_backward(&grid, &cache.x, cin, param("conv_in.w"), ch * cfg.halves(), &da, gw, gb, false);
    Ok(g)
}

fn two_mut(g: &mut [f64], a: core::ops::Range<usize>, b: core::ops::Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(a.end, b.start);
    let (x, y) = g[a.start..b.end].split_at_mut(a.len());
    (x, y)
}

fn attn_grads<'a>(g: &'a mut [f64], layout: &Layout, pass: &str) -> AttnGrads<'a> {
    let start = layout.range(&format!("{pass}.q")).start;
    let end = layout.range(&format!("{pass}.o")).end;
    let mut it = g[start..end].chunks_exact_mut((end - start) / 4);
    let mut next = || it.next().expect("four projections");
    AttnGrads { q: next(), k: next(), v: next(), o: next() }
}

/// Widens an RGB model to the joint RGB + point model.
///
/// Existing weights are copied bit for bit into the RGB rows/columns; every new
/// weight is zero, so the joint model reproduces the RGB model on channels
/// 0..3 and outputs exact zeros on channels 3..6.
pub fn augment_channels(rgb: &DenoiserParams, use_cross_attention: bool, attention_heads: usize) -> Result<DenoiserParams> {
    let c = rgb.config;
    let expected = DenoiserConfig { in_channels: 3, cond_channels: 3, use_cross_attention: false, ..c };
    if c != expected || rgb.layout != expected.layout() {
        return Err(Error::Layout { expected: describe(&expected.layout()), found: describe(&rgb.layout) });
    }
    let joint = DenoiserConfig { in_channels: 6, cond_channels: 6, use_cross_attention, attention_heads, ..c };
    let mut out = DenoiserParams::zeros(joint)?;
    let ch = c.hidden_channels;
    let src = |name: &str| &rgb.values[rgb.layout.range(name)];

    // conv_in: noisy RGB keeps its slot, the condition moves by 3 and the
    // coordinates by 6; only the v half of the output is filled.
    let (old_cin, new_cin, new_cout) = (c.input_channels(), joint.input_channels(), 2 * ch);
    let w_old = src("conv_in.w");
    let r = out.layout.range("conv_in.w");
    let w_new = &mut out.values[r];
    for tap in 0..9 {
        for ic in 0..old_cin {
            let nic = match ic {
                0..3 => ic,
                3..6 => ic + 3,
                _ => ic + 6,
            };
            let from = (tap * old_cin + ic) * ch;
            let to = (tap * new_cin + nic) * new_cout;
            w_new[to..to + ch].copy_from_slice(&w_old[from..from + ch]);
        }
    }
    let r = out.layout.range("conv_in.b");
    out.values[r.start..r.start + ch].copy_from_slice(src("conv_in.b"));

    for name in ["time.w", "time.b"] {
        let r = out.layout.range(name);
        out.values[r].copy_from_slice(src(name));
    }
    for b in 0..c.depth {
        for name in [format!("block{b}.w"), format!("block{b}.b")] {
            let r = out.layout.range(&name);
            out.values[r].copy_from_slice(src(&name));
        }
    }

    let w_old = src("conv_out.w");
    let r = out.layout.range("conv_out.w");
    let w_new = &mut out.values[r];
    for row in 0..9 * ch {
        w_new[row * 6..row * 6 + 3].copy_from_slice(&w_old[row * 3..row * 3 + 3]);
    }
    let r = out.layout.range("conv_out.b");
    out.values[r.start..r.start + 3].copy_from_slice(src("conv_out.b"));

    // Attention Q/K/V get a small deterministic init so the block can learn once
    // its zero output projection moves; they do not affect the initial output.
    if use_cross_attention {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_a77e);
        let bound = 1.0 / libm::sqrtf(ch as f32);
        for pass in ["attn1", "attn2"] {
            for m in ["q", "k", "v"] {
                let r = out.layout.range(&format!("{pass}.{m}"));
                for v in &mut out.values[r] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
    }
    Ok(out)
}

/// Parameters added by [`augment_channels`], computed from the two layouts.
pub fn augmentation_delta(rgb: &DenoiserConfig, use_cross_attention: bool) -> usize {
    let ch = rgb.hidden_channels;
    let pc = rgb.coord_channels;
    let conv_in = 9 * (12 + pc) * 2 * ch + 2 * ch - (9 * (6 + pc) * ch + ch);
    let conv_out = 9 * ch * 6 + 6 - (9 * ch * 3 + 3);
    let attn = if use_cross_attention { 8 * ch * ch } else { 0 };
    conv_in + conv_out + attn
}

impl core::fmt::Display for DenoiserConfig {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "in={} hidden={} depth={} temb={} cond={} xattn={} heads={} coords={}",
            self.in_channels,
            self.hidden_channels,
            self.depth,
            self.time_embed_dim,
            self.cond_channels,
            self.use_cross_attention,
            self.attention_heads,
            self.coord_channels
        )
    }
}

/// Compact `name[shape]` listing used in layout errors.
pub fn describe(l: &Layout) -> alloc::string::String {
    l.layers.iter().map(|s| format!("{}{:?}", s.name, s.shape)).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::super::ddim::{add_noise, ddim_step, final_step_eps_jacobian, run_to_final_step, sample_z0};
    use super::super::schedule::make_schedule;
    use super::*;
    use crate::geomreg::fd_gradient;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn joint_cfg(attn: bool) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: 6,
            hidden_channels: 4,
            depth: 2,
            time_embed_dim: 6,
            cond_channels: 6,
            use_cross_attention: attn,
            attention_heads: 2,
            coord_channels: 2,
        }
    }

    /// Perturbs every parameter away from zero so each path carries gradient.
    fn random_params(cfg: DenoiserConfig, seed: u64) -> DenoiserParams {
        let mut p = DenoiserParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for v in p.values_mut() {
            *v += rng.random_range(-0.2f32..0.2);
        }
        p
    }

    #[test]
    fn zero_params_zero_output() {
        let cfg = joint_cfg(true);
        let p = DenoiserParams::zeros(cfg).unwrap();
        let g = Grid { frames: 2, height: 3, width: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = rand_vec(&mut rng, g.pixels() * 6);
        let c = rand_vec(&mut rng, 9 * 3);
        assert!(p.forward(g, &z, 10, &c).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let p = random_params(joint_cfg(true), 3);
        let g = Grid { frames: 2, height: 4, width: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rand_vec(&mut rng, g.pixels() * 6);
        let c = rand_vec(&mut rng, 16 * 3);
        let a = p.forward(g, &z, 10, &c).unwrap();
        let b = p.forward(g, &z, 10, &c).unwrap();
        assert_eq!(a.len(), z.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(matches!(p.forward(g, &z[..z.len() - 6], 10, &c), Err(Error::Shape { .. })));
    }

    fn check_grad(cfg: DenoiserConfig) {
        let model = random_params(cfg, 11);
        let g = Grid { frames: 2, height: 8, width: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_vec(&mut rng, g.pixels() * cfg.in_channels);
        let eps = rand_vec(&mut rng, z.len());
        let c = rand_vec(&mut rng, g.tokens() * 3);
        let layout = model.layout().clone();
        let loss = |p: &[f64]| {
            let out = forward(&cfg, &layout, p, g, &z, 123, &c).unwrap().0;
            super::super::ddim::diff_loss(&out, &eps).unwrap().0
        };
        let p = model.to_f64();
        let (out, cache) = forward(&cfg, &layout, &p, g, &z, 123, &c).unwrap();
        let (_, d) = super::super::ddim::diff_loss(&out, &eps).unwrap();
        let an = backward(&cfg, &layout, &p, &cache, &d).unwrap();
        let fd = fd_gradient(loss, &p, 1e-5);
        let mut worst = 0.0f64;
        for (a, n) in an.iter().zip(&fd) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-7));
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn gradient_matches_fd_joint_with_attention() {
        check_grad(joint_cfg(true));
    }

    #[test]
    fn gradient_matches_fd_rgb() {
        check_grad(DenoiserConfig::rgb(4, 1, 4));
    }

    #[test]
    fn augmentation_identity() {
        let rgb = random_params(DenoiserConfig::rgb(5, 2, 6), 9);
        for attn in [false, true] {
            let joint = augment_channels(&rgb, attn, 1).unwrap();
            assert_eq!(joint.len() - rgb.len(), augmentation_delta(rgb.config(), attn));
            let g = Grid { frames: 2, height: 5, width: 4 };
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..10 {
                let zr = rand_vec(&mut rng, g.pixels() * 3);
                let zp = rand_vec(&mut rng, g.pixels() * 3);
                let c = rand_vec(&mut rng, g.tokens() * 3);
                let zj: Vec<f64> = zr.chunks(3).zip(zp.chunks(3)).flat_map(|(a, b)| a.iter().chain(b).copied()).collect();
                let t = rng.random_range(1..1000);
                let a = rgb.forward(g, &zr, t, &c).unwrap();
                let b = joint.forward(g, &zj, t, &c).unwrap();
                for (px, q) in a.chunks(3).zip(b.chunks(6)) {
                    assert_eq!(px, &q[..3]);
                    assert_eq!(&q[3..], &[0.0; 3]);
                }
            }
        }
        let j = augment_channels(&rgb, false, 1).unwrap();
        assert!(matches!(augment_channels(&j, false, 1), Err(Error::Layout { .. })));
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let g = Grid { frames: 1, height: 2, width: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (v, p) = (rand_vec(&mut rng, 24), rand_vec(&mut rng, 24));
        let w = rand_vec(&mut rng, 16);
        let zero = vec![0.0; 16];
        let wts = AttnWeights { q: &w, k: &w, v: &w, o: &zero };
        let (v1, _) = attention_pass(&g, &v, &p, 4, 2, wts);
        let (p1, _) = attention_pass(&g, &p, &v1, 4, 2, wts);
        assert_eq!(v1, v);
        assert_eq!(p1, p);
    }

    #[test]
    fn single_token_attends_fully() {
        let g = Grid { frames: 1, height: 1, width: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (v, p) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 4));
        let ws: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 16)).collect();
        let wts = AttnWeights { q: &ws[0], k: &ws[1], v: &ws[2], o: &ws[3] };
        let (out, _) = attention_pass(&g, &v, &p, 4, 1, wts);
        // Softmax over one key is 1, so the update is p W_v W_o.
        let pv = matmul(&p, 1, 4, &ws[2], 4);
        let upd = matmul(&pv, 1, 4, &ws[3], 4);
        for k in 0..4 {
            assert!((out[k] - (v[k] + upd[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn key_permutation_does_not_change_queries() {
        let g = Grid { frames: 1, height: 2, width: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (v, p) = (rand_vec(&mut rng, 32), rand_vec(&mut rng, 32));
        let ws: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, 16)).collect();
        let wts = AttnWeights { q: &ws[0], k: &ws[1], v: &ws[2], o: &ws[3] };
        let perm = [5usize, 2, 7, 0, 1, 6, 3, 4];
        let p_perm: Vec<f64> = perm.iter().flat_map(|&i| p[i * 4..i * 4 + 4].to_vec()).collect();
        let (a, _) = attention_pass(&g, &v, &p, 4, 2, wts);
        let (b, _) = attention_pass(&g, &v, &p_perm, 4, 2, wts);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn final_step_gradient_matches_two_phase() {
        let cfg = joint_cfg(false);
        let model = random_params(cfg, 21);
        let sched = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let g = Grid { frames: 2, height: 3, width: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = rand_vec(&mut rng, g.pixels() * 6);
        let eps = rand_vec(&mut rng, z0.len());
        let c = rand_vec(&mut rng, g.tokens() * 3);
        let probe = rand_vec(&mut rng, z0.len());
        let zt = add_noise(&z0, &eps, 400, &sched).unwrap();
        let p = model.to_f64();
        let layout = model.layout().clone();
        let m = Conditioned::new(&model, &p, g, &c);
        let last = run_to_final_step(&m, &zt, 400, 4, &sched).unwrap().unwrap();

        // Analytic path: final forward, dz0/deps chain, backward.
        let (eps_hat, cache) = forward(&cfg, &layout, &p, g, &last.z, last.t, &c).unwrap();
        let j = final_step_eps_jacobian(last.t, &sched);
        let d: Vec<f64> = probe.iter().map(|v| v * j).collect();
        let an = backward(&cfg, &layout, &p, &cache, &d).unwrap();

        // Explicit two-phase path: frozen input, FD through the final step only.
        let frozen = last.z.clone();
        let f = |q: &[f64]| {
            let e = forward(&cfg, &layout, q, g, &frozen, last.t, &c).unwrap().0;
            ddim_step(&frozen, &e, last.t, 0, &sched).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = fd_gradient(f, &p, 1e-5);
        for (a, n) in an.iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-6 * a.abs().max(n.abs()).max(1e-3), "{a} vs {n}");
        }
        let full = sample_z0(&m, &zt, 400, 4, &sched).unwrap();
        assert_eq!(full, ddim_step(&last.z, &eps_hat, last.t, 0, &sched).unwrap());
    }
}
