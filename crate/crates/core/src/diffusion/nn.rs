//! Minimal dense layers with hand-written backward passes.
//!
//! Feature maps are stored pixel-major: `[N][C]` with `N = H * W`, which lets
//! attention treat every pixel as a token without transposes. All arithmetic
//! is `f64`; tensors cross the public API as `f32`.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::attention_probs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter storage with named, shaped slices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor initialised with `N(0, std^2)` samples (`std = 0`
    /// gives exact zeros).
    pub fn add<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        for _ in 0..len {
            let v = if std == 0.0 {
                0.0
            } else {
                std * rng.sample::<f64, _>(StandardNormal)
            };
            self.data.push(v);
        }
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        let e = &self.entries[id.0];
        e.offset..e.offset + e.len
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[self.range(id)]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            data: alloc::vec![0.0; self.data.len()],
        }
    }

    /// Rounds every weight to the nearest `f32`, the precision of saved files.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Gradient buffer laid out like its [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<f64>,
}

impl Grads {
    pub fn slot(&mut self, params: &ParamSet, id: ParamId) -> &mut [f64] {
        let r = params.range(id);
        &mut self.data[r]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|g| g * g).sum())
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + libm::exp(-x));
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

pub fn silu_backward(x: &[f64], gy: &[f64]) -> Vec<f64> {
    x.iter().zip(gy).map(|(&v, &g)| g * silu_grad(v)).collect()
}

/// `x [n][cin] * w [cin][cout] + b`.
pub fn linear(x: &[f64], n: usize, cin: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * cout);
    for i in 0..n {
        out.extend_from_slice(b);
        let row = &mut out[i * cout..(i + 1) * cout];
        for (ci, &xv) in x[i * cin..(i + 1) * cin].iter().enumerate() {
            axpy(row, xv, &w[ci * cout..(ci + 1) * cout]);
        }
    }
    out
}

/// Returns `dL/dx`, accumulating into `gw` and `gb`.
pub fn linear_backward(
    x: &[f64],
    n: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut gx = alloc::vec![0.0; n * cin];
    for i in 0..n {
        let g = &gy[i * cout..(i + 1) * cout];
        axpy(gb, 1.0, g);
        for ci in 0..cin {
            let xv = x[i * cin + ci];
            let wrow = &w[ci * cout..(ci + 1) * cout];
            gx[i * cin + ci] = dot(g, wrow);
            axpy(&mut gw[ci * cout..(ci + 1) * cout], xv, g);
        }
    }
    gx
}

/// Same-padded 3x3 convolution; `w` is `[9][cin][cout]`.
pub fn conv3x3(
    x: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    w: &[f64],
    b: &[f64],
    cout: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * wd * cout);
    for _ in 0..h * wd {
        out.extend_from_slice(b);
    }
    for y in 0..h {
        for x0 in 0..wd {
            let p = y * wd + x0;
            let row = &mut out[p * cout..(p + 1) * cout];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x0 as isize + kx as isize - 1;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let sp = sy as usize * wd + sx as usize;
                    let wk = &w[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                    for (ci, &xv) in x[sp * cin..(sp + 1) * cin].iter().enumerate() {
                        axpy(row, xv, &wk[ci * cout..(ci + 1) * cout]);
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    x: &[f64],
    h: usize,
    wd: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut gx = alloc::vec![0.0; h * wd * cin];
    for y in 0..h {
        for x0 in 0..wd {
            let p = y * wd + x0;
            let g = &gy[p * cout..(p + 1) * cout];
            axpy(gb, 1.0, g);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x0 as isize + kx as isize - 1;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let sp = sy as usize * wd + sx as usize;
                    let k = ky * 3 + kx;
                    let wk = &w[k * cin * cout..(k + 1) * cin * cout];
                    let gwk = &mut gw[k * cin * cout..(k + 1) * cin * cout];
                    for ci in 0..cin {
                        let xv = x[sp * cin + ci];
                        gx[sp * cin + ci] += dot(g, &wk[ci * cout..(ci + 1) * cout]);
                        axpy(&mut gwk[ci * cout..(ci + 1) * cout], xv, g);
                    }
                }
            }
        }
    }
    gx
}

/// 2x2 average pooling (even `h`, `w`).
pub fn avgpool2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = alloc::vec![0.0; oh * ow * c];
    for y in 0..h {
        for x0 in 0..w {
            let o = ((y / 2) * ow + x0 / 2) * c;
            let s = (y * w + x0) * c;
            for ch in 0..c {
                out[o + ch] += 0.25 * x[s + ch];
            }
        }
    }
    out
}

pub fn avgpool2_backward(gy: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let ow = w / 2;
    let mut gx = alloc::vec![0.0; h * w * c];
    for y in 0..h {
        for x0 in 0..w {
            let o = ((y / 2) * ow + x0 / 2) * c;
            let s = (y * w + x0) * c;
            for ch in 0..c {
                gx[s + ch] = 0.25 * gy[o + ch];
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling from `h x w`.
pub fn upsample2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let ow = w * 2;
    let mut out = alloc::vec![0.0; 4 * h * w * c];
    for y in 0..2 * h {
        for x0 in 0..ow {
            let s = ((y / 2) * w + x0 / 2) * c;
            let o = (y * ow + x0) * c;
            out[o..o + c].copy_from_slice(&x[s..s + c]);
        }
    }
    out
}

pub fn upsample2_backward(gy: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let ow = w * 2;
    let mut gx = alloc::vec![0.0; h * w * c];
    for y in 0..2 * h {
        for x0 in 0..ow {
            let s = ((y / 2) * w + x0 / 2) * c;
            let o = (y * ow + x0) * c;
            for ch in 0..c {
                gx[s + ch] += gy[o + ch];
            }
        }
    }
    gx
}

/// Parameters of one single-head attention block with a residual output.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Cached activations of an attention block.
#[derive(Debug, Clone)]
pub struct AttnCache {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub probs: Vec<f64>,
    pub o: Vec<f64>,
    pub injected: bool,
}

/// `y = x + softmax((x Wq)(ctx Wk)^T + bias) / sqrt(d)) (ctx Wv) Wo + bo`.
///
/// `x` is `n x c`, `ctx` is `l x e`; the attention width equals `c`. When
/// `inject` is given it replaces the attention map.
#[allow(clippy::too_many_arguments)]
pub fn attention_block(
    params: &ParamSet,
    p: &AttnParams,
    x: &[f64],
    n: usize,
    c: usize,
    ctx: &[f64],
    l: usize,
    e: usize,
    bias: Option<&[f32]>,
    inject: Option<&[f64]>,
) -> (Vec<f64>, AttnCache) {
    let zeros = alloc::vec![0.0; c];
    let q = linear(x, n, c, params.get(p.wq), &zeros, c);
    let k = linear(ctx, l, e, params.get(p.wk), &zeros, c);
    let v = linear(ctx, l, e, params.get(p.wv), &zeros, c);
    let probs = match inject {
        Some(a) => a.to_vec(),
        None => attention_probs(&q, &k, n, l, c, c as f64, bias),
    };
    let o = matmul(&probs, &v, n, l, c);
    let proj = linear(&o, n, c, params.get(p.wo), params.get(p.bo), c);
    let y = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
    (
        y,
        AttnCache {
            q,
            k,
            v,
            probs,
            o,
            injected: inject.is_some(),
        },
    )
}

/// Backward of [`attention_block`]; returns `(dL/dx, dL/dctx)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block_backward(
    params: &ParamSet,
    p: &AttnParams,
    cache: &AttnCache,
    x: &[f64],
    n: usize,
    c: usize,
    ctx: &[f64],
    l: usize,
    e: usize,
    gy: &[f64],
    grads: &mut Grads,
) -> (Vec<f64>, Vec<f64>) {
    let mut gbo = alloc::vec![0.0; c];
    let mut gwo = alloc::vec![0.0; c * c];
    let go = linear_backward(&cache.o, n, c, params.get(p.wo), c, gy, &mut gwo, &mut gbo);
    add_into(grads.slot(params, p.wo), &gwo);
    add_into(grads.slot(params, p.bo), &gbo);

    // o = P v
    let ga = matmul_a_bt(&go, &cache.v, n, c, l);
    let gv = matmul_at_b(&cache.probs, &go, n, l, c);

    let mut gx: Vec<f64> = gy.to_vec();
    let mut gctx = alloc::vec![0.0; l * e];
    let mut dummy = alloc::vec![0.0; c];

    if !cache.injected {
        let inv = 1.0 / libm::sqrt(c as f64);
        let mut gs = alloc::vec![0.0; n * l];
        for i in 0..n {
            let pr = &cache.probs[i * l..(i + 1) * l];
            let gr = &ga[i * l..(i + 1) * l];
            let inner = dot(pr, gr);
            for j in 0..l {
                gs[i * l + j] = pr[j] * (gr[j] - inner) * inv;
            }
        }
        let gq = matmul(&gs, &cache.k, n, l, c);
        let gk = matmul_at_b(&gs, &cache.q, n, l, c);
        let mut gwq = alloc::vec![0.0; c * c];
        let gx_q = linear_backward(x, n, c, params.get(p.wq), c, &gq, &mut gwq, &mut dummy);
        add_into(grads.slot(params, p.wq), &gwq);
        add_into(&mut gx, &gx_q);
        let mut gwk = alloc::vec![0.0; e * c];
        let gc_k = linear_backward(ctx, l, e, params.get(p.wk), c, &gk, &mut gwk, &mut dummy);
        add_into(grads.slot(params, p.wk), &gwk);
        add_into(&mut gctx, &gc_k);
    }
    let mut gwv = alloc::vec![0.0; e * c];
    let gc_v = linear_backward(ctx, l, e, params.get(p.wv), c, &gv, &mut gwv, &mut dummy);
    add_into(grads.slot(params, p.wv), &gwv);
    add_into(&mut gctx, &gc_v);
    (gx, gctx)
}

/// `a [n][k] * b [k][m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(row, av, &b[kk * m..(kk + 1) * m]);
            }
        }
    }
    out
}

/// `a [n][k] * b [m][k]^T`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a [k][n]^T * b [k][m]`.
pub fn matmul_at_b(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; n * m];
    for kk in 0..k {
        let br = &b[kk * m..(kk + 1) * m];
        for i in 0..n {
            let av = a[kk * n + i];
            if av != 0.0 {
                axpy(&mut out[i * m..(i + 1) * m], av, br);
            }
        }
    }
    out
}

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    axpy(dst, 1.0, src);
}
