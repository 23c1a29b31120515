//! A small trainable convolutional noise predictor: symmetric
//! encoder/decoder with stride-4 resampling, a learned timestep embedding
//! projected into every layer, and conditioning injected at the
//! bottleneck. Gradients are hand-written reverse-mode passes over the
//! fixed layer vocabulary in [`ops`], verified coordinate by coordinate
//! against central finite differences.
//!
//! Each stage is a strided (or transposed) convolution followed by a
//! reduced residual block of two stride-1 convolutions with an additive
//! skip. Encoder activations are added into the matching-resolution
//! decoder inputs. All parameters live in one flat vector addressed
//! through a [`Layout`], which keeps the optimizer and checkpoint formats
//! trivial.

pub mod checkpoint;
pub mod ops;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::conditioner::{upsample_linear, ConditioningFrames};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::rng::RngStream;

use ops::{
    conv1d, conv1d_backward, conv1d_transpose, conv1d_transpose_backward, silu, silu_backward,
};

/// Architecture hyperparameters. `stride` is part of the type for
/// checkpoint clarity but only 4 is accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub kernel: usize,
    pub stride: usize,
    pub t_embed_dim: usize,
    /// Rows in the timestep embedding table; must cover the schedule.
    pub t_max: usize,
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            growth: 4,
            kernel: 5,
            stride: 4,
            t_embed_dim: 16,
            t_max: 1000,
            cond_dim: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride != 4 {
            return Err(Error::InvalidParameter(format!(
                "stride is fixed at 4, got {}",
                self.stride
            )));
        }
        if self.depth == 0 {
            return Err(Error::InvalidParameter("depth must be >= 1".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel must be odd and >= 1, got {}",
                self.kernel
            )));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("growth", self.growth),
            ("t_embed_dim", self.t_embed_dim),
            ("t_max", self.t_max),
            ("cond_dim", self.cond_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Channel counts per resolution: `[1, base, base*growth, ...]`,
    /// length depth+1.
    pub fn channels(&self) -> Vec<usize> {
        let mut ch = vec![1];
        for s in 0..self.depth {
            ch.push(self.base_channels * self.growth.pow(s as u32));
        }
        ch
    }

    /// Output channels of decoder stage `s`; the last stage keeps
    /// `base_channels` so the output convolution has something to mix.
    fn dec_out(&self, s: usize) -> usize {
        if s == 0 {
            self.base_channels
        } else {
            self.channels()[s]
        }
    }

    /// Total resampling factor; input lengths are padded to a multiple.
    pub fn resample_factor(&self) -> usize {
        self.stride.pow(self.depth as u32)
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic mapping from tensor names to flat-vector ranges.
#[derive(Debug, Clone)]
pub struct Layout {
    entries: Vec<ParamSpec>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels();
        let k = cfg.kernel;
        let td = cfg.t_embed_dim;
        let mut entries: Vec<ParamSpec> = Vec::new();
        let mut total = 0usize;
        let mut push = |entries: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>| {
            let spec = ParamSpec {
                name,
                shape,
                offset: total,
            };
            total += spec.len();
            entries.push(spec);
        };
        push(&mut entries, "embed.table".into(), vec![cfg.t_max, td]);
        for s in 0..cfg.depth {
            let (ci, co) = (ch[s], ch[s + 1]);
            push(&mut entries, format!("enc{s}.down.w"), vec![co, ci, k]);
            push(&mut entries, format!("enc{s}.down.b"), vec![co]);
            push(&mut entries, format!("enc{s}.down.p"), vec![co, td]);
            for r in 1..=2 {
                push(&mut entries, format!("enc{s}.res{r}.w"), vec![co, co, k]);
                push(&mut entries, format!("enc{s}.res{r}.b"), vec![co]);
                push(&mut entries, format!("enc{s}.res{r}.p"), vec![co, td]);
            }
        }
        push(&mut entries, "cond.w".into(), vec![ch[cfg.depth], cfg.cond_dim]);
        for s in (0..cfg.depth).rev() {
            let (ci, co) = (ch[s + 1], cfg.dec_out(s));
            push(&mut entries, format!("dec{s}.up.w"), vec![co, ci, k]);
            push(&mut entries, format!("dec{s}.up.b"), vec![co]);
            push(&mut entries, format!("dec{s}.up.p"), vec![co, td]);
            for r in 1..=2 {
                push(&mut entries, format!("dec{s}.res{r}.w"), vec![co, co, k]);
                push(&mut entries, format!("dec{s}.res{r}.b"), vec![co]);
                push(&mut entries, format!("dec{s}.res{r}.p"), vec![co, td]);
            }
        }
        push(&mut entries, "out.w".into(), vec![1, cfg.base_channels, k]);
        push(&mut entries, "out.b".into(), vec![1]);
        let by_name = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Ok(Self {
            entries,
            by_name,
            total,
        })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamSpec] {
        &self.entries
    }

    pub fn spec(&self, name: &str) -> &ParamSpec {
        &self.entries[self.by_name[name]]
    }

    pub fn get<'a>(&self, params: &'a [f64], name: &str) -> &'a [f64] {
        let s = self.spec(name);
        &params[s.offset..s.offset + s.len()]
    }

    pub fn get_mut<'a>(&self, params: &'a mut [f64], name: &str) -> &'a mut [f64] {
        let s = self.spec(name);
        &mut params[s.offset..s.offset + s.len()]
    }
}

/// Total trainable parameters for a config.
pub fn param_count(cfg: &DenoiserConfig) -> Result<usize> {
    Ok(Layout::new(cfg)?.total())
}

/// Fresh parameters: convolution and projection weights from a scaled
/// uniform fan-in law (bound 1/sqrt(fan_in)), biases zero, the embedding
/// table small-normal. Deterministic per rng stream.
pub fn init(cfg: &DenoiserConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
    let layout = Layout::new(cfg)?;
    let mut params = vec![0.0; layout.total()];
    for spec in layout.entries() {
        let dst = &mut params[spec.offset..spec.offset + spec.len()];
        if spec.name == "embed.table" {
            for v in dst.iter_mut() {
                *v = 0.01 * rng.normal();
            }
        } else if spec.shape.len() >= 2 {
            // Weight tensors: (out, in) or (out, in, k); fan-in is
            // everything but the leading dimension.
            let fan: usize = spec.shape[1..].iter().product();
            let bound = (1.0 / fan as f64).sqrt();
            for v in dst.iter_mut() {
                *v = rng.uniform(-bound, bound);
            }
        }
        // Bias vectors stay zero.
    }
    Ok(params)
}

struct StageCache {
    /// Input to the stage's resampling conv (after any skip adds).
    x_in: Vec<f64>,
    n_in: usize,
    /// Resampling conv output incl. bias and timestep term, pre-silu.
    pre: Vec<f64>,
    act: Vec<f64>,
    r1_pre: Vec<f64>,
    r1_act: Vec<f64>,
}

struct Cache {
    t: usize,
    e_t: Vec<f64>,
    len_orig: usize,
    len_pad: usize,
    pad_left: usize,
    enc: Vec<StageCache>,
    dec: Vec<StageCache>,
    /// Upsampled conditioning rows at the bottleneck, when present.
    cond_up: Option<Vec<f64>>,
    /// Input to the output convolution.
    out_in: Vec<f64>,
}

fn add_time_proj(h: &mut [f64], c: usize, n: usize, p: &[f64], e: &[f64]) {
    let td = e.len();
    for ch in 0..c {
        let shift: f64 = p[ch * td..(ch + 1) * td]
            .iter()
            .zip(e)
            .map(|(a, b)| a * b)
            .sum();
        for v in &mut h[ch * n..(ch + 1) * n] {
            *v += shift;
        }
    }
}

fn time_proj_backward(
    g: &[f64],
    c: usize,
    n: usize,
    p: &[f64],
    e: &[f64],
    gp: &mut [f64],
    ge: &mut [f64],
) {
    let td = e.len();
    for ch in 0..c {
        let gsum: f64 = g[ch * n..(ch + 1) * n].iter().sum();
        for d in 0..td {
            gp[ch * td + d] += gsum * e[d];
            ge[d] += gsum * p[ch * td + d];
        }
    }
}

fn forward_with_cache(
    cfg: &DenoiserConfig,
    layout: &Layout,
    params: &[f64],
    x: &[f64],
    t: usize,
    cond: Option<&ConditioningFrames>,
) -> Result<(Vec<f64>, Cache)> {
    if params.len() != layout.total() {
        return Err(Error::Shape(format!(
            "parameter vector has {} values, layout needs {}",
            params.len(),
            layout.total()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape("denoiser input must be non-empty".into()));
    }
    if t < 1 || t > cfg.t_max {
        return Err(Error::StepOutOfRange { t, t_max: cfg.t_max });
    }
    if let Some(c) = cond {
        if c.dim() != cfg.cond_dim {
            return Err(Error::Shape(format!(
                "conditioning dim {} does not match cond_dim {}",
                c.dim(),
                cfg.cond_dim
            )));
        }
    }
    let k = cfg.kernel;
    let ch = cfg.channels();
    let factor = cfg.resample_factor();
    let len_orig = x.len();
    let len_pad = len_orig.div_ceil(factor) * factor;
    let pad_left = (len_pad - len_orig) / 2;
    let e_t = layout.get(params, "embed.table")
        [(t - 1) * cfg.t_embed_dim..t * cfg.t_embed_dim]
        .to_vec();

    let mut h = vec![0.0; len_pad];
    h[pad_left..pad_left + len_orig].copy_from_slice(x);
    let mut n = len_pad;
    let mut enc = Vec::with_capacity(cfg.depth);
    for s in 0..cfg.depth {
        let (ci, co) = (ch[s], ch[s + 1]);
        let w = layout.get(params, &format!("enc{s}.down.w"));
        let b = layout.get(params, &format!("enc{s}.down.b"));
        let mut pre = conv1d(&h, ci, n, w, b, co, k, cfg.stride);
        let n_out = n / cfg.stride;
        add_time_proj(&mut pre, co, n_out, layout.get(params, &format!("enc{s}.down.p")), &e_t);
        let act = silu(&pre);
        let mut r1_pre = conv1d(
            &act,
            co,
            n_out,
            layout.get(params, &format!("enc{s}.res1.w")),
            layout.get(params, &format!("enc{s}.res1.b")),
            co,
            k,
            1,
        );
        add_time_proj(&mut r1_pre, co, n_out, layout.get(params, &format!("enc{s}.res1.p")), &e_t);
        let r1_act = silu(&r1_pre);
        let mut r2 = conv1d(
            &r1_act,
            co,
            n_out,
            layout.get(params, &format!("enc{s}.res2.w")),
            layout.get(params, &format!("enc{s}.res2.b")),
            co,
            k,
            1,
        );
        add_time_proj(&mut r2, co, n_out, layout.get(params, &format!("enc{s}.res2.p")), &e_t);
        let h_next: Vec<f64> = act.iter().zip(&r2).map(|(a, r)| a + r).collect();
        enc.push(StageCache {
            x_in: h,
            n_in: n,
            pre,
            act,
            r1_pre,
            r1_act,
        });
        h = h_next;
        n = n_out;
    }

    // Bottleneck conditioning: upsample the frames to the bottleneck
    // length and inject through a bias-free projection. Absent
    // conditioning is exactly the zero-frames path.
    let mut cond_up = None;
    if let Some(c) = cond {
        let up = upsample_linear(c, n)?;
        let wc = layout.get(params, "cond.w");
        let dim = cfg.cond_dim;
        let cd = ch[cfg.depth];
        for chn in 0..cd {
            for i in 0..n {
                let mut acc = 0.0;
                for d in 0..dim {
                    acc += wc[chn * dim + d] * up.data()[i * dim + d];
                }
                h[chn * n + i] += acc;
            }
        }
        cond_up = Some(up.data().to_vec());
    }

    let mut dec = Vec::with_capacity(cfg.depth);
    for s in (0..cfg.depth).rev() {
        let (ci, co) = (ch[s + 1], cfg.dec_out(s));
        let mut g = h;
        if s + 1 < cfg.depth {
            // Additive skip from the encoder feature at this resolution.
            for (gv, ev) in g.iter_mut().zip(&enc[s + 1].x_in) {
                *gv += ev;
            }
        }
        let w = layout.get(params, &format!("dec{s}.up.w"));
        let b = layout.get(params, &format!("dec{s}.up.b"));
        let mut pre = conv1d_transpose(&g, ci, n, w, b, co, k, cfg.stride);
        let n_out = n * cfg.stride;
        add_time_proj(&mut pre, co, n_out, layout.get(params, &format!("dec{s}.up.p")), &e_t);
        let act = silu(&pre);
        let mut r1_pre = conv1d(
            &act,
            co,
            n_out,
            layout.get(params, &format!("dec{s}.res1.w")),
            layout.get(params, &format!("dec{s}.res1.b")),
            co,
            k,
            1,
        );
        add_time_proj(&mut r1_pre, co, n_out, layout.get(params, &format!("dec{s}.res1.p")), &e_t);
        let r1_act = silu(&r1_pre);
        let mut r2 = conv1d(
            &r1_act,
            co,
            n_out,
            layout.get(params, &format!("dec{s}.res2.w")),
            layout.get(params, &format!("dec{s}.res2.b")),
            co,
            k,
            1,
        );
        add_time_proj(&mut r2, co, n_out, layout.get(params, &format!("dec{s}.res2.p")), &e_t);
        let h_next: Vec<f64> = act.iter().zip(&r2).map(|(a, r)| a + r).collect();
        dec.push(StageCache {
            x_in: g,
            n_in: n,
            pre,
            act,
            r1_pre,
            r1_act,
        });
        h = h_next;
        n = n_out;
    }

    let y_full = conv1d(
        &h,
        cfg.base_channels,
        len_pad,
        layout.get(params, "out.w"),
        layout.get(params, "out.b"),
        1,
        k,
        1,
    );
    let y = y_full[pad_left..pad_left + len_orig].to_vec();
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("denoiser forward output contains {bad}"),
            step: t as u64,
        });
    }
    Ok((
        y,
        Cache {
            t,
            e_t,
            len_orig,
            len_pad,
            pad_left,
            enc,
            dec,
            cond_up,
            out_in: h,
        },
    ))
}

/// Noise prediction for one sequence. Output length always equals input
/// length; any length is accepted via balanced zero padding to a multiple
/// of stride^depth and exact cropping back.
pub fn forward(
    cfg: &DenoiserConfig,
    layout: &Layout,
    params: &[f64],
    x: &[f64],
    t: usize,
    cond: Option<&ConditioningFrames>,
) -> Result<Vec<f64>> {
    Ok(forward_with_cache(cfg, layout, params, x, t, cond)?.0)
}

/// Backward through one stage's residual block and resampling conv.
/// Returns the gradient with respect to the stage input and accumulates
/// parameter gradients and the timestep-embedding gradient.
#[allow(clippy::too_many_arguments)]
fn stage_backward(
    cfg: &DenoiserConfig,
    layout: &Layout,
    params: &[f64],
    grads: &mut [f64],
    ge: &mut [f64],
    e_t: &[f64],
    prefix: &str,
    transposed: bool,
    c_in: usize,
    c_out: usize,
    cache: &StageCache,
    g_out: &[f64],
) -> Vec<f64> {
    let k = cfg.kernel;
    let n_out = if transposed {
        cache.n_in * cfg.stride
    } else {
        cache.n_in / cfg.stride
    };
    // h_out = act + r2(r1(act)); both branches receive g_out.
    // res2 conv (input r1_act), with its timestep projection.
    time_proj_backward(
        g_out,
        c_out,
        n_out,
        layout.get(params, &format!("{prefix}.res2.p")),
        e_t,
        layout.get_mut(grads, &format!("{prefix}.res2.p")),
        ge,
    );
    let mut g_r1_act = vec![0.0; c_out * n_out];
    {
        let spec_w = layout.spec(&format!("{prefix}.res2.w"));
        let spec_b = layout.spec(&format!("{prefix}.res2.b"));
        let (gw, gb) = two_slices(grads, spec_w, spec_b);
        conv1d_backward(
            g_out,
            &cache.r1_act,
            c_out,
            n_out,
            layout.get(params, &format!("{prefix}.res2.w")),
            c_out,
            k,
            1,
            &mut g_r1_act,
            gw,
            gb,
        );
    }
    let mut g_r1_pre = vec![0.0; c_out * n_out];
    silu_backward(&g_r1_act, &cache.r1_pre, &mut g_r1_pre);
    time_proj_backward(
        &g_r1_pre,
        c_out,
        n_out,
        layout.get(params, &format!("{prefix}.res1.p")),
        e_t,
        layout.get_mut(grads, &format!("{prefix}.res1.p")),
        ge,
    );
    let mut g_act = g_out.to_vec();
    {
        let spec_w = layout.spec(&format!("{prefix}.res1.w"));
        let spec_b = layout.spec(&format!("{prefix}.res1.b"));
        let (gw, gb) = two_slices(grads, spec_w, spec_b);
        conv1d_backward(
            &g_r1_pre,
            &cache.act,
            c_out,
            n_out,
            layout.get(params, &format!("{prefix}.res1.w")),
            c_out,
            k,
            1,
            &mut g_act,
            gw,
            gb,
        );
    }
    let mut g_pre = vec![0.0; c_out * n_out];
    silu_backward(&g_act, &cache.pre, &mut g_pre);
    let (proj, conv_w, conv_b) = if transposed {
        ("up.p", "up.w", "up.b")
    } else {
        ("down.p", "down.w", "down.b")
    };
    time_proj_backward(
        &g_pre,
        c_out,
        n_out,
        layout.get(params, &format!("{prefix}.{proj}")),
        e_t,
        layout.get_mut(grads, &format!("{prefix}.{proj}")),
        ge,
    );
    let mut g_xin = vec![0.0; c_in * cache.n_in];
    {
        let spec_w = layout.spec(&format!("{prefix}.{conv_w}"));
        let spec_b = layout.spec(&format!("{prefix}.{conv_b}"));
        let (gw, gb) = two_slices(grads, spec_w, spec_b);
        if transposed {
            conv1d_transpose_backward(
                &g_pre,
                &cache.x_in,
                c_in,
                cache.n_in,
                layout.get(params, &format!("{prefix}.{conv_w}")),
                c_out,
                k,
                cfg.stride,
                &mut g_xin,
                gw,
                gb,
            );
        } else {
            conv1d_backward(
                &g_pre,
                &cache.x_in,
                c_in,
                cache.n_in,
                layout.get(params, &format!("{prefix}.{conv_w}")),
                c_out,
                k,
                cfg.stride,
                &mut g_xin,
                gw,
                gb,
            );
        }
    }
    g_xin
}

/// Borrow two disjoint layout ranges mutably. Entries never overlap, so
/// the split is always resolvable.
fn two_slices<'a>(
    buf: &'a mut [f64],
    a: &ParamSpec,
    b: &ParamSpec,
) -> (&'a mut [f64], &'a mut [f64]) {
    assert!(a.offset + a.len() <= b.offset || b.offset + b.len() <= a.offset);
    if a.offset < b.offset {
        let (lo, hi) = buf.split_at_mut(b.offset);
        (&mut lo[a.offset..a.offset + a.len()], &mut hi[..b.len()])
    } else {
        let (lo, hi) = buf.split_at_mut(a.offset);
        let (gb, ga) = (&mut lo[b.offset..b.offset + b.len()], &mut hi[..a.len()]);
        (ga, gb)
    }
}

fn backward(
    cfg: &DenoiserConfig,
    layout: &Layout,
    params: &[f64],
    cache: &Cache,
    gy: &[f64],
    grads: &mut [f64],
) {
    let k = cfg.kernel;
    let ch = cfg.channels();
    let mut ge = vec![0.0; cfg.t_embed_dim];

    let mut g_full = vec![0.0; cache.len_pad];
    g_full[cache.pad_left..cache.pad_left + cache.len_orig].copy_from_slice(gy);
    let mut g_cur = vec![0.0; cfg.base_channels * cache.len_pad];
    {
        let spec_w = layout.spec("out.w");
        let spec_b = layout.spec("out.b");
        let (gw, gb) = two_slices(grads, spec_w, spec_b);
        conv1d_backward(
            &g_full,
            &cache.out_in,
            cfg.base_channels,
            cache.len_pad,
            layout.get(params, "out.w"),
            1,
            k,
            1,
            &mut g_cur,
            gw,
            gb,
        );
    }

    // Gradient accumulators for each encoder stage's output h_{s+1}.
    let mut g_enc_out: Vec<Option<Vec<f64>>> = (0..cfg.depth).map(|_| None).collect();
    let add_into = |slot: &mut Option<Vec<f64>>, g: &[f64]| match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    };

    // Decoder stages in reverse execution order; dec[i] ran stage
    // s = depth-1-i, so reverse iteration visits s = 0, 1, ...
    for (i, s) in (0..cfg.depth).enumerate() {
        let cache_idx = cfg.depth - 1 - s;
        let stage = &cache.dec[cache_idx];
        let g_xin = stage_backward(
            cfg,
            layout,
            params,
            grads,
            &mut ge,
            &cache.e_t,
            &format!("dec{s}"),
            true,
            ch[s + 1],
            cfg.dec_out(s),
            stage,
            &g_cur,
        );
        let _ = i;
        if s + 1 < cfg.depth {
            // The stage input was (previous decoder output + encoder
            // skip); both addends receive the same gradient.
            add_into(&mut g_enc_out[s], &g_xin);
            g_cur = g_xin;
        } else {
            // Bottleneck input: route through the conditioning injection
            // and into the last encoder stage's output.
            if let Some(up) = &cache.cond_up {
                let dim = cfg.cond_dim;
                let cd = ch[cfg.depth];
                let n = stage.n_in;
                let gwc = layout.get_mut(grads, "cond.w");
                for chn in 0..cd {
                    for i in 0..n {
                        let g = g_xin[chn * n + i];
                        for d in 0..dim {
                            gwc[chn * dim + d] += g * up[i * dim + d];
                        }
                    }
                }
            }
            add_into(&mut g_enc_out[s], &g_xin);
        }
    }

    // Encoder stages, deepest first.
    for s in (0..cfg.depth).rev() {
        let g_out = g_enc_out[s]
            .take()
            .expect("every encoder stage output feeds the decoder");
        let g_xin = stage_backward(
            cfg,
            layout,
            params,
            grads,
            &mut ge,
            &cache.e_t,
            &format!("enc{s}"),
            false,
            ch[s],
            ch[s + 1],
            &cache.enc[s],
            &g_out,
        );
        if s > 0 {
            add_into(&mut g_enc_out[s - 1], &g_xin);
        }
    }

    // Scatter the accumulated embedding gradient into the table row.
    let gt = layout.get_mut(grads, "embed.table");
    for (d, g) in ge.iter().enumerate() {
        gt[(cache.t - 1) * cfg.t_embed_dim + d] += g;
    }
}

/// One supervised example with optional conditioning.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub cond: Option<ConditioningFrames>,
}

/// Mean-over-batch noise-prediction loss and its gradient for every
/// parameter. Per item the loss is mean((eps_hat - eps)^2); items may
/// have different lengths.
pub fn loss_and_grad(
    cfg: &DenoiserConfig,
    layout: &Layout,
    params: &[f64],
    batch: &[BatchItem],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("batch must be non-empty".into()));
    }
    let mut item_losses = Vec::with_capacity(batch.len());
    let mut item_grads = Vec::with_capacity(batch.len());
    for (i, item) in batch.iter().enumerate() {
        if item.x_t.len() != item.eps.len() {
            return Err(Error::LengthMismatch {
                left: item.x_t.len(),
                right: item.eps.len(),
            });
        }
        let (y, cache) = forward_with_cache(
            cfg,
            layout,
            params,
            &item.x_t,
            item.t,
            item.cond.as_ref(),
        )
        .map_err(|e| match e {
            Error::NonFinite { context, step } => Error::NonFinite {
                context: format!("batch item {i}: {context}"),
                step,
            },
            other => other,
        })?;
        let n = y.len() as f64;
        let mut loss = 0.0;
        let mut gy = Vec::with_capacity(y.len());
        for (yh, e) in y.iter().zip(&item.eps) {
            let r = yh - e;
            loss += r * r / n;
            gy.push(2.0 * r / n);
        }
        let mut grads = vec![0.0; layout.total()];
        backward(cfg, layout, params, &cache, &gy, &mut grads);
        item_losses.push(loss);
        item_grads.push(grads);
    }
    // Pairwise halving reduction: duplicating the batch then sums two
    // identical subtrees, so the mean is bitwise invariant under
    // duplication (and the summation is better conditioned than a fold).
    let scale = 1.0 / batch.len() as f64;
    let loss = pairwise_sum_scalars(&item_losses) * scale;
    let mut grads = pairwise_sum_vecs(item_grads);
    for g in &mut grads {
        *g *= scale;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "loss accumulation".into(),
            step: 0,
        });
    }
    Ok((loss, grads))
}

fn pairwise_sum_scalars(vals: &[f64]) -> f64 {
    match vals.len() {
        1 => vals[0],
        n => {
            let (lo, hi) = vals.split_at(n / 2);
            pairwise_sum_scalars(lo) + pairwise_sum_scalars(hi)
        }
    }
}

fn pairwise_sum_vecs(mut items: Vec<Vec<f64>>) -> Vec<f64> {
    fn rec(items: &mut [Vec<f64>]) -> Vec<f64> {
        match items.len() {
            1 => std::mem::take(&mut items[0]),
            n => {
                let (lo, hi) = items.split_at_mut(n / 2);
                let mut acc = rec(lo);
                let rest = rec(hi);
                for (a, b) in acc.iter_mut().zip(&rest) {
                    *a += b;
                }
                acc
            }
        }
    }
    rec(&mut items)
}

/// Adaptive-moment optimizer state over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected adaptive-moment update, in place.
pub fn train_step(
    params: &mut [f64],
    opt: &mut OptimizerState,
    grads: &[f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: grads.len(),
        });
    }
    opt.step += 1;
    let b1t = 1.0 - opt.beta1.powi(opt.step as i32);
    let b2t = 1.0 - opt.beta2.powi(opt.step as i32);
    for i in 0..params.len() {
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * grads[i];
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * grads[i] * grads[i];
        let mh = opt.m[i] / b1t;
        let vh = opt.v[i] / b2t;
        params[i] -= opt.lr * mh / (vh.sqrt() + opt.eps);
    }
    Ok(())
}

/// A config plus trained parameters, usable as a sampling-time noise
/// predictor.
#[derive(Debug, Clone)]
pub struct ConvDenoiser {
    cfg: DenoiserConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl ConvDenoiser {
    pub fn new(cfg: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&cfg)?;
        if params.len() != layout.total() {
            return Err(Error::Shape(format!(
                "expected {} parameters for this config, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }
}

impl Denoiser for ConvDenoiser {
    fn predict(
        &self,
        x_t: &[f64],
        t: usize,
        cond: Option<&ConditioningFrames>,
    ) -> Result<Vec<f64>> {
        forward(&self.cfg, &self.layout, &self.params, x_t, t, cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            depth: 1,
            base_channels: 2,
            growth: 2,
            kernel: 3,
            stride: 4,
            t_embed_dim: 4,
            t_max: 5,
            cond_dim: 3,
        }
    }

    fn rand_cond(rng: &mut RngStream, n_frames: usize, dim: usize) -> ConditioningFrames {
        let rows = (0..n_frames).map(|_| rng.normal_vec(dim)).collect();
        ConditioningFrames::from_rows(rows).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = DenoiserConfig::default();
        let a = init(&cfg, &mut RngStream::new(5)).unwrap();
        let b = init(&cfg, &mut RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        let c = init(&cfg, &mut RngStream::new(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_parameter_count_golden() {
        // Shape arithmetic for the default config (depth 2, base 8,
        // growth 4, kernel 5, t_embed 16, T 1000, cond 16):
        //   table 16000; encoder 1088 + 13152; cond 512;
        //   decoder 2328 + 1368; output 41.
        assert_eq!(param_count(&DenoiserConfig::default()).unwrap(), 34489);
    }

    #[test]
    fn fresh_init_zero_input_is_finite() {
        let cfg = DenoiserConfig::default();
        let layout = Layout::new(&cfg).unwrap();
        let params = init(&cfg, &mut RngStream::new(1)).unwrap();
        let y = forward(&cfg, &layout, &params, &vec![0.0; 128], 1, None).unwrap();
        assert_eq!(y.len(), 128);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn output_length_matches_input_length() {
        let cfg = DenoiserConfig::default();
        let layout = Layout::new(&cfg).unwrap();
        let params = init(&cfg, &mut RngStream::new(2)).unwrap();
        let mut rng = RngStream::new(3);
        for len in [64usize, 256, 1000] {
            let x = rng.normal_vec(len);
            let y = forward(&cfg, &layout, &params, &x, 7, None).unwrap();
            assert_eq!(y.len(), len, "len {len}");
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn absent_conditioning_equals_zero_conditioning() {
        let cfg = DenoiserConfig::default();
        let layout = Layout::new(&cfg).unwrap();
        let params = init(&cfg, &mut RngStream::new(4)).unwrap();
        let x = RngStream::new(5).normal_vec(64);
        let zeros = ConditioningFrames::from_rows(vec![vec![0.0; 16]; 3]).unwrap();
        let a = forward(&cfg, &layout, &params, &x, 3, None).unwrap();
        let b = forward(&cfg, &layout, &params, &x, 3, Some(&zeros)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn timestep_changes_output() {
        let cfg = DenoiserConfig::default();
        let layout = Layout::new(&cfg).unwrap();
        let params = init(&cfg, &mut RngStream::new(6)).unwrap();
        let x = RngStream::new(7).normal_vec(64);
        let y1 = forward(&cfg, &layout, &params, &x, 1, None).unwrap();
        let y2 = forward(&cfg, &layout, &params, &x, cfg.t_max, None).unwrap();
        let d: f64 = y1.iter().zip(&y2).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(d > 0.0, "timestep embedding had no effect");
    }

    #[test]
    fn conditioning_changes_output() {
        let cfg = DenoiserConfig::default();
        let layout = Layout::new(&cfg).unwrap();
        let params = init(&cfg, &mut RngStream::new(8)).unwrap();
        let mut rng = RngStream::new(9);
        let x = rng.normal_vec(64);
        let c1 = rand_cond(&mut rng, 3, 16);
        let c2 = rand_cond(&mut rng, 3, 16);
        let y1 = forward(&cfg, &layout, &params, &x, 2, Some(&c1)).unwrap();
        let y2 = forward(&cfg, &layout, &params, &x, 2, Some(&c2)).unwrap();
        assert!(y1.iter().zip(&y2).any(|(a, b)| a != b));
    }

    fn fd_batch(rng: &mut RngStream, cfg: &DenoiserConfig, with_cond: bool) -> Vec<BatchItem> {
        (0..3)
            .map(|i| BatchItem {
                x_t: rng.normal_vec(8 + 4 * i),
                t: 1 + i % cfg.t_max,
                eps: rng.normal_vec(8 + 4 * i),
                cond: if with_cond {
                    Some(rand_cond(rng, 2, cfg.cond_dim))
                } else {
                    None
                },
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        // Every coordinate, three random batches, h = 1e-5; the guarded
        // relative error must stay under 1e-4.
        let cfg = tiny_config();
        let layout = Layout::new(&cfg).unwrap();
        for trial in 0..3u64 {
            let mut rng = RngStream::new(100 + trial);
            let mut params = init(&cfg, &mut rng).unwrap();
            // Nonzero biases so their gradients are exercised off the
            // init manifold.
            for spec in layout.entries() {
                if spec.name.ends_with(".b") {
                    for v in &mut params[spec.offset..spec.offset + spec.len()] {
                        *v = 0.05 * rng.normal();
                    }
                }
            }
            let batch = fd_batch(&mut rng, &cfg, trial % 2 == 0);
            let (_, grads) = loss_and_grad(&cfg, &layout, &params, &batch).unwrap();
            let h = 1e-5;
            let mut worst = 0.0f64;
            for i in 0..params.len() {
                let orig = params[i];
                params[i] = orig + h;
                let (lp, _) = loss_and_grad(&cfg, &layout, &params, &batch).unwrap();
                params[i] = orig - h;
                let (lm, _) = loss_and_grad(&cfg, &layout, &params, &batch).unwrap();
                params[i] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let denom = grads[i].abs().max(fd.abs()).max(1e-6);
                let rel = (grads[i] - fd).abs() / denom;
                worst = worst.max(rel);
                assert!(
                    rel < 1e-4,
                    "trial {trial} param {i} ({}): analytic {} vs fd {fd}",
                    layout
                        .entries()
                        .iter()
                        .find(|s| i >= s.offset && i < s.offset + s.len())
                        .map(|s| s.name.as_str())
                        .unwrap_or("?"),
                    grads[i]
                );
            }
            assert!(worst < 1e-4);
        }
    }

    #[test]
    fn self_targets_give_zero_loss_and_grads() {
        let cfg = tiny_config();
        let layout = Layout::new(&cfg).unwrap();
        let mut rng = RngStream::new(20);
        let params = init(&cfg, &mut rng).unwrap();
        let x = rng.normal_vec(12);
        let y = forward(&cfg, &layout, &params, &x, 2, None).unwrap();
        let batch = vec![BatchItem {
            x_t: x,
            t: 2,
            eps: y,
            cond: None,
        }];
        let (loss, grads) = loss_and_grad(&cfg, &layout, &params, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn duplicated_batch_changes_nothing() {
        let cfg = tiny_config();
        let layout = Layout::new(&cfg).unwrap();
        let mut rng = RngStream::new(21);
        let params = init(&cfg, &mut rng).unwrap();
        let batch = fd_batch(&mut rng, &cfg, true);
        let mut doubled = batch.clone();
        doubled.extend(batch.iter().cloned());
        let (l1, g1) = loss_and_grad(&cfg, &layout, &params, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&cfg, &layout, &params, &doubled).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let cfg = tiny_config();
        let mut params = init(&cfg, &mut RngStream::new(22)).unwrap();
        let before = params.clone();
        let mut opt = OptimizerState::new(params.len(), 1e-3);
        train_step(&mut params, &mut opt, &vec![0.0; before.len()]).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn single_adam_step_moves_by_learning_rate() {
        let mut params = vec![1.0];
        let mut opt = OptimizerState::new(1, 0.1);
        train_step(&mut params, &mut opt, &[1.0]).unwrap();
        // Bias-corrected first step: m_hat = 1, v_hat = 1, so the update
        // is lr/(1 + eps) = lr to within eps.
        assert!((params[0] - 0.9).abs() < 1e-8, "got {}", params[0]);
    }

    #[test]
    fn overfit_smoke_halves_the_loss() {
        let cfg = DenoiserConfig {
            depth: 1,
            base_channels: 4,
            growth: 4,
            kernel: 5,
            stride: 4,
            t_embed_dim: 8,
            t_max: 10,
            cond_dim: 4,
        };
        let layout = Layout::new(&cfg).unwrap();
        let mut rng = RngStream::new(23);
        let mut params = init(&cfg, &mut rng).unwrap();
        let batch: Vec<BatchItem> = (0..16)
            .map(|i| BatchItem {
                x_t: rng.normal_vec(64),
                t: 1 + i % cfg.t_max,
                eps: rng.normal_vec(64),
                cond: None,
            })
            .collect();
        let mut opt = OptimizerState::new(params.len(), 1e-2);
        let (loss0, _) = loss_and_grad(&cfg, &layout, &params, &batch).unwrap();
        let mut last = loss0;
        for _ in 0..200 {
            let (l, grads) = loss_and_grad(&cfg, &layout, &params, &batch).unwrap();
            train_step(&mut params, &mut opt, &grads).unwrap();
            last = l;
        }
        assert!(
            last <= 0.5 * loss0,
            "loss went {loss0} -> {last}, wanted at least a 50% drop"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let layout = Layout::new(&cfg).unwrap();
        let run = || {
            let mut rng = RngStream::new(30);
            let mut params = init(&cfg, &mut rng).unwrap();
            let batch = fd_batch(&mut rng, &cfg, true);
            let mut opt = OptimizerState::new(params.len(), 1e-3);
            for _ in 0..3 {
                let (_, grads) = loss_and_grad(&cfg, &layout, &params, &batch).unwrap();
                train_step(&mut params, &mut opt, &grads).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_and_range_violations() {
        let cfg = tiny_config();
        let layout = Layout::new(&cfg).unwrap();
        let params = init(&cfg, &mut RngStream::new(31)).unwrap();
        assert!(matches!(
            forward(&cfg, &layout, &params, &[0.1; 8], 0, None),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            forward(&cfg, &layout, &params, &[0.1; 8], 6, None),
            Err(Error::StepOutOfRange { .. })
        ));
        let bad_cond = ConditioningFrames::from_rows(vec![vec![0.0; 2]]).unwrap();
        assert!(matches!(
            forward(&cfg, &layout, &params, &[0.1; 8], 1, Some(&bad_cond)),
            Err(Error::Shape(_))
        ));
        let bad_cfg = DenoiserConfig {
            stride: 2,
            ..tiny_config()
        };
        assert!(Layout::new(&bad_cfg).is_err());
    }

    #[test]
    fn nan_parameters_abort_with_diagnostics() {
        let cfg = tiny_config();
        let layout = Layout::new(&cfg).unwrap();
        let mut params = init(&cfg, &mut RngStream::new(32)).unwrap();
        params[layout.spec("out.w").offset] = f64::NAN;
        let batch = vec![BatchItem {
            x_t: vec![0.5; 8],
            t: 1,
            eps: vec![0.0; 8],
            cond: None,
        }];
        match loss_and_grad(&cfg, &layout, &params, &batch) {
            Err(Error::NonFinite { context, .. }) => {
                assert!(context.contains("batch item 0"), "context: {context}")
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn conv_denoiser_implements_the_sampling_interface() {
        let cfg = tiny_config();
        let layout = Layout::new(&cfg).unwrap();
        let params = init(&cfg, &mut RngStream::new(33)).unwrap();
        let x = RngStream::new(34).normal_vec(37);
        let want = forward(&cfg, &layout, &params, &x, 2, None).unwrap();
        let den = ConvDenoiser::new(cfg, params).unwrap();
        let got = den.predict(&x, 2, None).unwrap();
        assert_eq!(got, want);
        assert_eq!(got.len(), 37);
    }
}
