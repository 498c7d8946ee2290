//! The toy denoiser and its structure-conditioning branch.
//!
//! The denoiser is a two-resolution U-Net in miniature:
//!
//! ```text
//! x ─ conv_in ─ res(e16) ──────────────────────────────┐ skip
//!                  └ pool ─ down ─ res(d8) ─ +branch8   │
//!                            self8 ─ cross8 ─ up ───────+─ res(d16) ─ [inject] ─ +branch16
//!                                                          self16 ─ cross16 ─ conv_out ─ eps
//! ```
//!
//! Attention layers sit on the decoder side at both resolutions. The output
//! of `res(d16)` is the feature map recorded during inversion and injected
//! during editing.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::*;
use crate::attention::{cross_attention_bias, self_attention_bias, AttentionBias, TokenSet};
use crate::captions::caption_words;
use crate::error::{shape_err, Error, Result};
use crate::layout::{build_pyramid, BinaryMask, LabelMap};
use crate::tensor::Tensor;

/// Architecture manifest, serialised next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Side of the square latent grid.
    pub grid: usize,
    pub in_channels: usize,
    /// Channel width at full and half resolution.
    pub widths: [usize; 2],
    pub time_dim: usize,
    pub time_hidden: usize,
    pub embed_dim: usize,
    pub max_tokens: usize,
    pub vocab: Vec<String>,
    /// Classes in the layout fed to the structure branch.
    pub layout_classes: usize,
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// Token id of the empty caption used for unconditional predictions.
pub const NULL_TOKEN: usize = 0;

const BASE_VOCAB: &[&str] = &[
    "<null>", ".", ",", "a", "an", "the", "of", "and", "on", "photo", "painting", "sketch", "oil",
    "pastel", "red", "green", "blue", "yellow", "violet", "pink", "multi-color", "orange", "white",
    "black", "gray", "circle", "square", "triangle", "wooden", "stone", "metallic", "paper",
    "dotted", "striped", "lettered", "background", "snowy", "rainy", "foggy", "day",
];

impl Default for Architecture {
    fn default() -> Self {
        Self {
            grid: 16,
            in_channels: 3,
            widths: [16, 32],
            time_dim: 16,
            time_hidden: 32,
            embed_dim: 16,
            max_tokens: 32,
            vocab: BASE_VOCAB.iter().map(|s| s.to_string()).collect(),
            layout_classes: 4,
            train_steps: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
        }
    }
}

/// Kind of an attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLayerInfo {
    pub name: String,
    pub kind: AttentionKind,
    pub grid: usize,
}

impl Architecture {
    /// Attention layers in execution order.
    pub fn attention_layers(&self) -> Vec<AttentionLayerInfo> {
        let half = self.grid / 2;
        [
            ("dec8.self", AttentionKind::SelfAttention, half),
            ("dec8.cross", AttentionKind::Cross, half),
            ("dec16.self", AttentionKind::SelfAttention, self.grid),
            ("dec16.cross", AttentionKind::Cross, self.grid),
        ]
        .into_iter()
        .map(|(name, kind, grid)| AttentionLayerInfo {
            name: name.into(),
            kind,
            grid,
        })
        .collect()
    }

    /// Grid sides of the attention resolutions, coarse first.
    pub fn attention_grids(&self) -> [usize; 2] {
        [self.grid / 2, self.grid]
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || !self.grid.is_multiple_of(2) {
            return Err(shape_err!("grid must be even and >= 2, got {}", self.grid));
        }
        if self.vocab.first().map(String::as_str) != Some("<null>") {
            return Err(Error::Domain("vocabulary must start with <null>".into()));
        }
        if self.vocab.len() > 64 {
            return Err(Error::Domain(alloc::format!(
                "vocabulary has {} words, at most 64 allowed",
                self.vocab.len()
            )));
        }
        Ok(())
    }

    pub fn token_id(&self, word: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    /// Token ids of a caption; one id per word or punctuation mark.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<usize>> {
        let ids = caption_words(caption)
            .iter()
            .map(|w| self.token_id(w))
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Domain("caption has no tokens".into()));
        }
        if ids.len() > self.max_tokens {
            return Err(Error::Domain(alloc::format!(
                "caption has {} tokens, limit is {}",
                ids.len(),
                self.max_tokens
            )));
        }
        Ok(ids)
    }

    fn pixels(&self) -> usize {
        self.grid * self.grid
    }
}

#[derive(Debug, Clone, Copy)]
struct ResParams {
    conv1_w: ParamId,
    conv1_b: ParamId,
    time_w: ParamId,
    time_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DenoiserIds {
    t1_w: ParamId,
    t1_b: ParamId,
    t2_w: ParamId,
    t2_b: ParamId,
    tok: ParamId,
    pos: ParamId,
    conv_in_w: ParamId,
    conv_in_b: ParamId,
    enc16: ResParams,
    down_w: ParamId,
    down_b: ParamId,
    dec8: ResParams,
    self8: AttnParams,
    cross8: AttnParams,
    up_w: ParamId,
    up_b: ParamId,
    dec16: ResParams,
    self16: AttnParams,
    cross16: AttnParams,
    conv_out_w: ParamId,
    conv_out_b: ParamId,
}

/// Mask-guided attention biases for one forward pass. Index 0 is the coarse
/// grid, index 1 the full grid.
#[derive(Debug, Clone, Default)]
pub struct LayerBiases {
    pub self_bias: [Option<AttentionBias>; 2],
    pub cross_bias: [Option<AttentionBias>; 2],
}

impl LayerBiases {
    /// Biases for an object `mask` at the attention `grids` (coarse first).
    /// Self-attention is always confined; cross-attention only when
    /// `(attribute tokens, caption length, degree)` is given.
    pub fn from_mask(mask: &BinaryMask, grids: [usize; 2], cross: Option<(&TokenSet, usize, f32)>) -> Result<Self> {
        let pyramid = build_pyramid(mask, 2)?;
        let mut out = Self::default();
        for (level, side) in grids.into_iter().enumerate() {
            let m = pyramid
                .at_size(side, side)
                .ok_or_else(|| shape_err!("mask pyramid has no {side}x{side} level"))?;
            out.self_bias[level] = Some(self_attention_bias(m));
            if let Some((attr, len, degree)) = cross {
                out.cross_bias[level] = Some(cross_attention_bias(m, attr, len, degree)?);
            }
        }
        Ok(out)
    }
}

/// Per-call options of [`ToyDenoiser::forward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub biases: Option<&'a LayerBiases>,
    /// Replaces the `res(d16)` output, `N x widths[0]`.
    pub inject_features: Option<&'a [f64]>,
    /// Replaces the self-attention maps at each resolution.
    pub inject_maps: [Option<&'a [f64]>; 2],
    pub structure: Option<&'a BranchOutput>,
}

#[derive(Debug, Clone)]
struct ResCache {
    x: Vec<f64>,
    a: Vec<f64>,
    h: Vec<f64>,
    hb: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Vec<f64>,
    temb0: Vec<f64>,
    th: Vec<f64>,
    temb: Vec<f64>,
    st: Vec<f64>,
    tokens: Vec<usize>,
    ctx: Vec<f64>,
    enc16: ResCache,
    pooled: Vec<f64>,
    dec8: ResCache,
    m_in: Vec<f64>,
    self8: AttnCache,
    s8: Vec<f64>,
    cross8: AttnCache,
    up: Vec<f64>,
    dec16: ResCache,
    injected: bool,
    g_in: Vec<f64>,
    self16: AttnCache,
    s16: Vec<f64>,
    cross16: AttnCache,
    c16: Vec<f64>,
}

/// Result of one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Predicted noise, pixel-major `N x in_channels`.
    pub eps: Vec<f64>,
    /// Output of `res(d16)` before injection.
    pub features: Vec<f64>,
    /// Self-attention maps at both resolutions.
    pub maps: [Vec<f64>; 2],
    pub cache: ForwardCache,
}

/// Gradients produced by [`ToyDenoiser::backward`].
#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub params: Grads,
    /// Gradient with respect to the branch outputs, coarse first.
    pub branch: [Vec<f64>; 2],
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    arch: Architecture,
    params: ParamSet,
    ids: DenoiserIds,
    trained: bool,
}

fn res_params(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c: usize, td: usize) -> ResParams {
    let conv_std = libm::sqrt(1.0 / (9.0 * c as f64));
    ResParams {
        conv1_w: p.add(&alloc::format!("{name}.conv1.w"), &[9, c, c], conv_std, rng),
        conv1_b: p.add(&alloc::format!("{name}.conv1.b"), &[c], 0.0, rng),
        time_w: p.add(&alloc::format!("{name}.time.w"), &[td, c], libm::sqrt(1.0 / td as f64), rng),
        time_b: p.add(&alloc::format!("{name}.time.b"), &[c], 0.0, rng),
        conv2_w: p.add(&alloc::format!("{name}.conv2.w"), &[9, c, c], 0.1 * conv_std, rng),
        conv2_b: p.add(&alloc::format!("{name}.conv2.b"), &[c], 0.0, rng),
    }
}

fn attn_params(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c: usize, e: usize) -> AttnParams {
    let s = libm::sqrt(1.0 / c as f64);
    let se = libm::sqrt(1.0 / e as f64);
    AttnParams {
        wq: p.add(&alloc::format!("{name}.q"), &[c, c], s, rng),
        wk: p.add(&alloc::format!("{name}.k"), &[e, c], se, rng),
        wv: p.add(&alloc::format!("{name}.v"), &[e, c], se, rng),
        wo: p.add(&alloc::format!("{name}.o.w"), &[c, c], 0.1 * s, rng),
        bo: p.add(&alloc::format!("{name}.o.b"), &[c], 0.0, rng),
    }
}

fn build_denoiser(arch: &Architecture, seed: u64) -> (ParamSet, DenoiserIds) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let [c0, c1] = arch.widths;
    let (td, th, e, cin) = (arch.time_dim, arch.time_hidden, arch.embed_dim, arch.in_channels);
    let r = &mut rng;
    let t1_w = p.add("time.fc1.w", &[td, th], libm::sqrt(1.0 / td as f64), r);
    let t1_b = p.add("time.fc1.b", &[th], 0.0, r);
    let t2_w = p.add("time.fc2.w", &[th, th], libm::sqrt(1.0 / th as f64), r);
    let t2_b = p.add("time.fc2.b", &[th], 0.0, r);
    let tok = p.add("text.token", &[arch.vocab.len(), e], 1.0, r);
    let pos = p.add("text.position", &[arch.max_tokens, e], 0.3, r);
    let conv_in_w = p.add("conv_in.w", &[9, cin, c0], libm::sqrt(1.0 / (9.0 * cin as f64)), r);
    let conv_in_b = p.add("conv_in.b", &[c0], 0.0, r);
    let enc16 = res_params(&mut p, r, "enc16", c0, th);
    let down_w = p.add("down.w", &[c0, c1], libm::sqrt(1.0 / c0 as f64), r);
    let down_b = p.add("down.b", &[c1], 0.0, r);
    let dec8 = res_params(&mut p, r, "dec8.res", c1, th);
    let self8 = attn_params(&mut p, r, "dec8.self", c1, c1);
    let cross8 = attn_params(&mut p, r, "dec8.cross", c1, e);
    let up_w = p.add("up.w", &[c1, c0], libm::sqrt(1.0 / c1 as f64), r);
    let up_b = p.add("up.b", &[c0], 0.0, r);
    let dec16 = res_params(&mut p, r, "dec16.res", c0, th);
    let self16 = attn_params(&mut p, r, "dec16.self", c0, c0);
    let cross16 = attn_params(&mut p, r, "dec16.cross", c0, e);
    let conv_out_w = p.add("conv_out.w", &[9, c0, cin], 0.5 * libm::sqrt(1.0 / (9.0 * c0 as f64)), r);
    let conv_out_b = p.add("conv_out.b", &[cin], 0.0, r);
    let ids = DenoiserIds {
        t1_w,
        t1_b,
        t2_w,
        t2_b,
        tok,
        pos,
        conv_in_w,
        conv_in_b,
        enc16,
        down_w,
        down_b,
        dec8,
        self8,
        cross8,
        up_w,
        up_b,
        dec16,
        self16,
        cross16,
        conv_out_w,
        conv_out_b,
    };
    (p, ids)
}

/// Sinusoidal timestep features.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = alloc::vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        let arg = t as f64 * freq;
        out[i] = libm::sin(arg);
        out[half + i] = libm::cos(arg);
    }
    out
}

impl ToyDenoiser {
    /// Freshly initialised, untrained weights.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (params, ids) = build_denoiser(&arch, seed);
        Ok(Self {
            arch,
            params,
            ids,
            trained: false,
        })
    }

    /// Rebuilds a model from saved weights; every parameter must be present.
    pub fn from_weights(
        arch: Architecture,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut model = Self::new(arch, 0)?;
        load_params(&mut model.params, &mut lookup)?;
        model.trained = true;
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Every weight as a named tensor.
    pub fn weights(&self) -> Vec<(String, Tensor)> {
        export_params(&self.params)
    }

    fn text_context(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let e = self.arch.embed_dim;
        if tokens.is_empty() || tokens.len() > self.arch.max_tokens {
            return Err(shape_err!("caption length {} out of range", tokens.len()));
        }
        let tok = self.params.get(self.ids.tok);
        let pos = self.params.get(self.ids.pos);
        let mut ctx = Vec::with_capacity(tokens.len() * e);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.arch.vocab.len() {
                return Err(shape_err!("token id {t} outside vocabulary"));
            }
            for j in 0..e {
                ctx.push(tok[t * e + j] + pos[i * e + j]);
            }
        }
        Ok(ctx)
    }

    fn res_forward(&self, r: &ResParams, x: Vec<f64>, side: usize, c: usize, st: &[f64]) -> (Vec<f64>, ResCache) {
        let p = &self.params;
        let th = self.arch.time_hidden;
        let a = silu_vec(&x);
        let mut h = conv3x3(&a, side, side, c, p.get(r.conv1_w), p.get(r.conv1_b), c);
        let tb = linear(st, 1, th, p.get(r.time_w), p.get(r.time_b), c);
        for px in h.chunks_mut(c) {
            add_into(px, &tb);
        }
        let hb = silu_vec(&h);
        let h2 = conv3x3(&hb, side, side, c, p.get(r.conv2_w), p.get(r.conv2_b), c);
        let y = x.iter().zip(&h2).map(|(a, b)| a + b).collect();
        (y, ResCache { x, a, h, hb })
    }

    fn res_backward(
        &self,
        r: &ResParams,
        cache: &ResCache,
        side: usize,
        c: usize,
        st: &[f64],
        gy: &[f64],
        grads: &mut Grads,
        g_st: &mut [f64],
    ) -> Vec<f64> {
        let p = &self.params;
        let th = self.arch.time_hidden;
        let mut gw = alloc::vec![0.0; 9 * c * c];
        let mut gb = alloc::vec![0.0; c];
        let g_hb = conv3x3_backward(&cache.hb, side, side, c, p.get(r.conv2_w), c, gy, &mut gw, &mut gb);
        add_into(grads.slot(p, r.conv2_w), &gw);
        add_into(grads.slot(p, r.conv2_b), &gb);
        let g_h = silu_backward(&cache.h, &g_hb);
        let mut g_tb = alloc::vec![0.0; c];
        for px in g_h.chunks(c) {
            add_into(&mut g_tb, px);
        }
        let mut gtw = alloc::vec![0.0; th * c];
        let mut gtb = alloc::vec![0.0; c];
        let g_st_local = linear_backward(st, 1, th, p.get(r.time_w), c, &g_tb, &mut gtw, &mut gtb);
        add_into(grads.slot(p, r.time_w), &gtw);
        add_into(grads.slot(p, r.time_b), &gtb);
        add_into(g_st, &g_st_local);
        let mut gw1 = alloc::vec![0.0; 9 * c * c];
        let mut gb1 = alloc::vec![0.0; c];
        let g_a = conv3x3_backward(&cache.a, side, side, c, p.get(r.conv1_w), c, &g_h, &mut gw1, &mut gb1);
        add_into(grads.slot(p, r.conv1_w), &gw1);
        add_into(grads.slot(p, r.conv1_b), &gb1);
        let mut gx = silu_backward(&cache.x, &g_a);
        add_into(&mut gx, gy);
        gx
    }

    /// Evaluates the denoiser on a pixel-major latent `N x in_channels`.
    pub fn forward(
        &self,
        x: &[f64],
        timestep: usize,
        tokens: &[usize],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let a = &self.arch;
        let (g, n) = (a.grid, a.pixels());
        let (g2, n2) = (g / 2, n / 4);
        let [c0, c1] = a.widths;
        let (cin, e) = (a.in_channels, a.embed_dim);
        if x.len() != n * cin {
            return Err(shape_err!("latent has {} values, expected {}", x.len(), n * cin));
        }
        let p = &self.params;
        let ids = &self.ids;

        let temb0 = timestep_embedding(timestep, a.time_dim);
        let th = linear(&temb0, 1, a.time_dim, p.get(ids.t1_w), p.get(ids.t1_b), a.time_hidden);
        let ths = silu_vec(&th);
        let temb = linear(&ths, 1, a.time_hidden, p.get(ids.t2_w), p.get(ids.t2_b), a.time_hidden);
        let st = silu_vec(&temb);
        let ctx = self.text_context(tokens)?;
        let l = tokens.len();

        let bias = |kind: usize, level: usize| -> Option<&[f32]> {
            let b = opts.biases?;
            let slot = if kind == 0 { &b.self_bias[level] } else { &b.cross_bias[level] };
            slot.as_ref().map(|v| v.values())
        };
        if let Some(b) = opts.biases {
            for (level, side) in [g2, g].into_iter().enumerate() {
                let nn = side * side;
                if let Some(sb) = &b.self_bias[level] {
                    if sb.rows() != nn || sb.cols() != nn {
                        return Err(shape_err!("self bias at level {level} has wrong shape"));
                    }
                }
                if let Some(cb) = &b.cross_bias[level] {
                    if cb.rows() != nn || cb.cols() != l {
                        return Err(shape_err!(
                            "cross bias at level {level} is {}x{}, expected {nn}x{l}",
                            cb.rows(),
                            cb.cols()
                        ));
                    }
                }
            }
        }

        let h0 = conv3x3(x, g, g, cin, p.get(ids.conv_in_w), p.get(ids.conv_in_b), c0);
        let (h1, enc16) = self.res_forward(&ids.enc16, h0, g, c0, &st);
        let pooled = avgpool2(&h1, g, g, c0);
        let d = linear(&pooled, n2, c0, p.get(ids.down_w), p.get(ids.down_b), c1);
        let (mut m, dec8) = self.res_forward(&ids.dec8, d, g2, c1, &st);
        if let Some(s) = opts.structure {
            add_into(&mut m, &s.coarse);
        }
        let (s8, self8) =
            attention_block(p, &ids.self8, &m, n2, c1, &m, n2, c1, bias(0, 0), opts.inject_maps[0]);
        let (c8, cross8) = attention_block(p, &ids.cross8, &s8, n2, c1, &ctx, l, e, bias(1, 0), None);
        let upv = upsample2(&c8, g2, g2, c1);
        let mut u = linear(&upv, n, c1, p.get(ids.up_w), p.get(ids.up_b), c0);
        add_into(&mut u, &h1);
        let (features, dec16) = self.res_forward(&ids.dec16, u, g, c0, &st);
        let mut g_in = match opts.inject_features {
            Some(f) => {
                if f.len() != n * c0 {
                    return Err(shape_err!("injected features have {} values, expected {}", f.len(), n * c0));
                }
                f.to_vec()
            }
            None => features.clone(),
        };
        if let Some(s) = opts.structure {
            add_into(&mut g_in, &s.fine);
        }
        let (s16, self16) =
            attention_block(p, &ids.self16, &g_in, n, c0, &g_in, n, c0, bias(0, 1), opts.inject_maps[1]);
        let (c16, cross16) = attention_block(p, &ids.cross16, &s16, n, c0, &ctx, l, e, bias(1, 1), None);
        let o = silu_vec(&c16);
        let eps = conv3x3(&o, g, g, c0, p.get(ids.conv_out_w), p.get(ids.conv_out_b), cin);

        let maps = [self8.probs.clone(), self16.probs.clone()];
        Ok(ForwardOutput {
            eps,
            features,
            maps,
            cache: ForwardCache {
                x: x.to_vec(),
                temb0,
                th,
                temb,
                st,
                tokens: tokens.to_vec(),
                ctx,
                enc16,
                pooled,
                dec8,
                m_in: m,
                self8,
                s8,
                cross8,

                up: upv,
                dec16,
                injected: opts.inject_features.is_some(),
                g_in,
                self16,
                s16,
                cross16,
                c16,
            },
        })
    }

    /// Backpropagates `g_eps` (pixel-major, like `eps`) through a cached pass.
    pub fn backward(&self, cache: &ForwardCache, g_eps: &[f64]) -> DenoiserGrads {
        let a = &self.arch;
        let (g, n) = (a.grid, a.pixels());
        let (g2, n2) = (g / 2, n / 4);
        let [c0, c1] = a.widths;
        let (cin, e, th) = (a.in_channels, a.embed_dim, a.time_hidden);
        let p = &self.params;
        let ids = &self.ids;
        let mut grads = p.zeros_like();
        let mut g_st = alloc::vec![0.0; th];
        let l = cache.tokens.len();
        let mut g_ctx = alloc::vec![0.0; l * e];

        // conv_out
        let o = silu_vec(&cache.c16);
        let mut gw = alloc::vec![0.0; 9 * c0 * cin];
        let mut gb = alloc::vec![0.0; cin];
        let g_o = conv3x3_backward(&o, g, g, c0, p.get(ids.conv_out_w), cin, g_eps, &mut gw, &mut gb);
        add_into(grads.slot(p, ids.conv_out_w), &gw);
        add_into(grads.slot(p, ids.conv_out_b), &gb);
        let g_c16 = silu_backward(&cache.c16, &g_o);

        let (g_s16, gc) = attention_block_backward(
            p, &ids.cross16, &cache.cross16, &cache.s16, n, c0, &cache.ctx, l, e, &g_c16, &mut grads,
        );
        add_into(&mut g_ctx, &gc);
        let (mut g_gin, g_self_ctx) = attention_block_backward(
            p, &ids.self16, &cache.self16, &cache.g_in, n, c0, &cache.g_in, n, c0, &g_s16, &mut grads,
        );
        add_into(&mut g_gin, &g_self_ctx);
        let branch_fine = g_gin.clone();

        let g_features = if cache.injected {
            alloc::vec![0.0; n * c0]
        } else {
            g_gin
        };
        let g_u = self.res_backward(&ids.dec16, &cache.dec16, g, c0, &cache.st, &g_features, &mut grads, &mut g_st);
        // u = up(upv) + h1
        let mut g_h1 = g_u.clone();
        let mut gw = alloc::vec![0.0; c1 * c0];
        let mut gb = alloc::vec![0.0; c0];
        let g_upv = linear_backward(&cache.up, n, c1, p.get(ids.up_w), c0, &g_u, &mut gw, &mut gb);
        add_into(grads.slot(p, ids.up_w), &gw);
        add_into(grads.slot(p, ids.up_b), &gb);
        let g_c8 = upsample2_backward(&g_upv, g2, g2, c1);

        let (g_s8, gc) = attention_block_backward(
            p, &ids.cross8, &cache.cross8, &cache.s8, n2, c1, &cache.ctx, l, e, &g_c8, &mut grads,
        );
        add_into(&mut g_ctx, &gc);
        let (mut g_m, g_self_ctx) = attention_block_backward(
            p, &ids.self8, &cache.self8, &cache.m_in, n2, c1, &cache.m_in, n2, c1, &g_s8, &mut grads,
        );
        add_into(&mut g_m, &g_self_ctx);
        let branch_coarse = g_m.clone();

        let g_d = self.res_backward(&ids.dec8, &cache.dec8, g2, c1, &cache.st, &g_m, &mut grads, &mut g_st);
        let mut gw = alloc::vec![0.0; c0 * c1];
        let mut gb = alloc::vec![0.0; c1];
        let g_pooled = linear_backward(&cache.pooled, n2, c0, p.get(ids.down_w), c1, &g_d, &mut gw, &mut gb);
        add_into(grads.slot(p, ids.down_w), &gw);
        add_into(grads.slot(p, ids.down_b), &gb);
        add_into(&mut g_h1, &avgpool2_backward(&g_pooled, g, g, c0));

        let g_h0 = self.res_backward(&ids.enc16, &cache.enc16, g, c0, &cache.st, &g_h1, &mut grads, &mut g_st);
        let mut gw = alloc::vec![0.0; 9 * cin * c0];
        let mut gb = alloc::vec![0.0; c0];
        let _ = conv3x3_backward(&cache.x, g, g, cin, p.get(ids.conv_in_w), c0, &g_h0, &mut gw, &mut gb);
        add_into(grads.slot(p, ids.conv_in_w), &gw);
        add_into(grads.slot(p, ids.conv_in_b), &gb);

        // time embedding
        let g_temb = silu_backward(&cache.temb, &g_st);
        let mut gw = alloc::vec![0.0; th * th];
        let mut gb = alloc::vec![0.0; th];
        let ths = silu_vec(&cache.th);
        let g_ths = linear_backward(&ths, 1, th, p.get(ids.t2_w), th, &g_temb, &mut gw, &mut gb);
        add_into(grads.slot(p, ids.t2_w), &gw);
        add_into(grads.slot(p, ids.t2_b), &gb);
        let g_th = silu_backward(&cache.th, &g_ths);
        let mut gw = alloc::vec![0.0; a.time_dim * th];
        let mut gb = alloc::vec![0.0; th];
        let _ = linear_backward(&cache.temb0, 1, a.time_dim, p.get(ids.t1_w), th, &g_th, &mut gw, &mut gb);
        add_into(grads.slot(p, ids.t1_w), &gw);
        add_into(grads.slot(p, ids.t1_b), &gb);

        // text embeddings
        let tok_range = p.range(ids.tok);
        let pos_range = p.range(ids.pos);
        for (i, &t) in cache.tokens.iter().enumerate() {
            for j in 0..e {
                let gv = g_ctx[i * e + j];
                grads.data[tok_range.start + t * e + j] += gv;
                grads.data[pos_range.start + i * e + j] += gv;
            }
        }

        DenoiserGrads {
            params: grads,
            branch: [branch_coarse, branch_fine],
        }
    }
}

/// Per-resolution additive outputs of the structure branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    /// `N/4 x widths[1]`.
    pub coarse: Vec<f64>,
    /// `N x widths[0]`.
    pub fine: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pooled: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct BranchIds {
    conv_w: ParamId,
    conv_b: ParamId,
    fine_w: ParamId,
    fine_b: ParamId,
    coarse_w: ParamId,
    coarse_b: ParamId,
}

/// Lightweight encoder over the one-hot layout whose outputs are added to the
/// decoder features. Its output projections start at exactly zero.
#[derive(Debug, Clone)]
pub struct StructureBranch {
    arch: Architecture,
    params: ParamSet,
    ids: BranchIds,
}

impl StructureBranch {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b4a2);
        let mut p = ParamSet::new();
        let k = arch.layout_classes;
        let [c0, c1] = arch.widths;
        let r = &mut rng;
        let ids = BranchIds {
            conv_w: p.add("branch.conv.w", &[9, k, c0], libm::sqrt(1.0 / (9.0 * k as f64)), r),
            conv_b: p.add("branch.conv.b", &[c0], 0.0, r),
            fine_w: p.add("branch.zero_fine.w", &[c0, c0], 0.0, r),
            fine_b: p.add("branch.zero_fine.b", &[c0], 0.0, r),
            coarse_w: p.add("branch.zero_coarse.w", &[c0, c1], 0.0, r),
            coarse_b: p.add("branch.zero_coarse.b", &[c1], 0.0, r),
        };
        Self { arch, params: p, ids }
    }

    pub fn from_weights(arch: Architecture, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut branch = Self::new(arch, 0);
        load_params(&mut branch.params, &mut lookup)?;
        Ok(branch)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn weights(&self) -> Vec<(String, Tensor)> {
        export_params(&self.params)
    }

    /// True while both output projections are exactly zero.
    pub fn is_zero_projection(&self) -> bool {
        [self.ids.fine_w, self.ids.fine_b, self.ids.coarse_w, self.ids.coarse_b]
            .iter()
            .all(|&id| self.params.get(id).iter().all(|&v| v == 0.0))
    }

    /// One-hot encoding of a layout, pixel-major.
    pub fn encode_layout(&self, label: &LabelMap) -> Result<Vec<f64>> {
        let g = self.arch.grid;
        if label.height() != g || label.width() != g {
            return Err(shape_err!(
                "layout is {}x{}, branch expects {g}x{g}",
                label.height(),
                label.width()
            ));
        }
        let k = self.arch.layout_classes;
        let mut out = alloc::vec![0.0; g * g * k];
        for (i, &c) in label.classes().iter().enumerate() {
            if (c as usize) < k {
                out[i * k + c as usize] = 1.0;
            }
        }
        Ok(out)
    }

    pub fn forward(&self, layout: &LabelMap) -> Result<(BranchOutput, BranchCache)> {
        let input = self.encode_layout(layout)?;
        let g = self.arch.grid;
        let [c0, c1] = self.arch.widths;
        let k = self.arch.layout_classes;
        let p = &self.params;
        let hidden_pre = conv3x3(&input, g, g, k, p.get(self.ids.conv_w), p.get(self.ids.conv_b), c0);
        let hidden = silu_vec(&hidden_pre);
        let fine = linear(&hidden, g * g, c0, p.get(self.ids.fine_w), p.get(self.ids.fine_b), c0);
        let pooled = avgpool2(&hidden, g, g, c0);
        let coarse = linear(&pooled, g * g / 4, c0, p.get(self.ids.coarse_w), p.get(self.ids.coarse_b), c1);
        Ok((
            BranchOutput { coarse, fine },
            BranchCache {
                input,
                hidden_pre,
                hidden,
                pooled,
            },
        ))
    }

    pub fn backward(&self, cache: &BranchCache, g_out: &[Vec<f64>; 2]) -> Grads {
        let g = self.arch.grid;
        let [c0, c1] = self.arch.widths;
        let k = self.arch.layout_classes;
        let p = &self.params;
        let ids = &self.ids;
        let mut grads = p.zeros_like();
        let mut gw = alloc::vec![0.0; c0 * c1];
        let mut gb = alloc::vec![0.0; c1];
        let g_pooled = linear_backward(&cache.pooled, g * g / 4, c0, p.get(ids.coarse_w), c1, &g_out[0], &mut gw, &mut gb);
        add_into(grads.slot(p, ids.coarse_w), &gw);
        add_into(grads.slot(p, ids.coarse_b), &gb);
        let mut gw = alloc::vec![0.0; c0 * c0];
        let mut gb = alloc::vec![0.0; c0];
        let mut g_hidden = linear_backward(&cache.hidden, g * g, c0, p.get(ids.fine_w), c0, &g_out[1], &mut gw, &mut gb);
        add_into(grads.slot(p, ids.fine_w), &gw);
        add_into(grads.slot(p, ids.fine_b), &gb);
        add_into(&mut g_hidden, &avgpool2_backward(&g_pooled, g, g, c0));
        let g_pre = silu_backward(&cache.hidden_pre, &g_hidden);
        let mut gw = alloc::vec![0.0; 9 * k * c0];
        let mut gb = alloc::vec![0.0; c0];
        let _ = conv3x3_backward(&cache.input, g, g, k, p.get(ids.conv_w), c0, &g_pre, &mut gw, &mut gb);
        add_into(grads.slot(p, ids.conv_w), &gw);
        add_into(grads.slot(p, ids.conv_b), &gb);
        grads
    }
}

fn export_params(params: &ParamSet) -> Vec<(String, Tensor)> {
    params
        .entries()
        .iter()
        .map(|e| {
            let data = &params.flat()[e.offset..e.offset + e.len];
            let t = Tensor::from_f64(&e.shape, data).expect("parameter shapes are consistent");
            (e.name.clone(), t)
        })
        .collect()
}

fn load_params(params: &mut ParamSet, lookup: &mut impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
    let entries = params.entries().to_vec();
    for e in entries {
        let t = lookup(&e.name).ok_or_else(|| Error::Domain(alloc::format!("missing weight {}", e.name)))?;
        if t.dims() != e.shape.as_slice() {
            return Err(shape_err!("weight {} has dims {:?}, expected {:?}", e.name, t.dims(), e.shape));
        }
        if !t.all_finite() {
            return Err(Error::Domain(alloc::format!("weight {} has non-finite values", e.name)));
        }
        for (dst, &src) in params.flat_mut()[e.offset..e.offset + e.len].iter_mut().zip(t.data()) {
            *dst = src as f64;
        }
    }
    Ok(())
}

/// Converts a `C x H x W` tensor to pixel-major `f64`.
pub fn chw_to_pixels(t: &Tensor) -> Result<Vec<f64>> {
    let [c, h, w] = match t.dims() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(shape_err!("expected C x H x W, got {:?}", other)),
    };
    let d = t.data();
    let mut out = alloc::vec![0.0; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = d[ch * h * w + p] as f64;
        }
    }
    Ok(out)
}

/// Inverse of [`chw_to_pixels`].
pub fn pixels_to_chw(px: &[f64], c: usize, h: usize, w: usize) -> Result<Tensor> {
    if px.len() != c * h * w {
        return Err(shape_err!("{} values cannot form {c}x{h}x{w}", px.len()));
    }
    let mut out = alloc::vec![0.0f32; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            out[ch * h * w + p] = px[p * c + ch] as f32;
        }
    }
    Tensor::new(alloc::vec![c, h, w], out)
}
