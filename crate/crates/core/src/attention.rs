//! Mask-guided attention.
//!
//! Attention logits are corrected by an additive [`AttentionBias`] before the
//! `sqrt(d)` scaling and the row softmax:
//!
//! ```text
//! A = softmax((Q K^T + B) / sqrt(d))
//! ```
//!
//! In cross-attention `B` boosts the attribute tokens by the degree `c` for
//! queries inside the object mask and suppresses them with [`NEG_LARGE`] for
//! queries outside. In self-attention `B` suppresses every pair of tokens that
//! lie in different regions of the mask.

use alloc::vec::Vec;

use crate::error::{domain_err, shape_err, Result};
use crate::layout::{BinaryMask, NEG_LARGE};
use crate::tensor::Tensor;

/// Key-token indices whose attention is rectified.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSet {
    indices: Vec<usize>,
}

impl TokenSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Largest index, if any.
    pub fn max(&self) -> Option<usize> {
        self.indices.last().copied()
    }
}

impl FromIterator<usize> for TokenSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Additive logit correction for one attention layer, `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl AttentionBias {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: alloc::vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Cross-attention bias of shape `mask.len() x num_text_tokens`.
///
/// Entry `(q, k)` is `degree` when `k` is an attribute token and `q` lies on
/// the object, [`NEG_LARGE`] when `k` is an attribute token and `q` lies off
/// the object, and `0` otherwise.
pub fn cross_attention_bias(
    mask: &BinaryMask,
    attr_tokens: &TokenSet,
    num_text_tokens: usize,
    degree: f32,
) -> Result<AttentionBias> {
    if let Some(max) = attr_tokens.max() {
        if max >= num_text_tokens {
            return Err(domain_err!(
                "attribute token {max} out of range for {num_text_tokens} text tokens"
            ));
        }
    }
    if !(degree >= 0.0 && degree.is_finite()) {
        return Err(domain_err!("degree must be a finite non-negative number, got {degree}"));
    }
    let rows = mask.len();
    let mut values = alloc::vec![0.0f32; rows * num_text_tokens];
    for (q, &inside) in mask.bits().iter().enumerate() {
        let fill = if inside { degree } else { NEG_LARGE };
        let row = &mut values[q * num_text_tokens..(q + 1) * num_text_tokens];
        for &k in attr_tokens.indices() {
            row[k] = fill;
        }
    }
    Ok(AttentionBias {
        rows,
        cols: num_text_tokens,
        values,
    })
}

/// Self-attention bias of shape `N x N`: `0` between tokens of the same
/// region, [`NEG_LARGE`] across regions.
pub fn self_attention_bias(mask: &BinaryMask) -> AttentionBias {
    let bits = mask.bits();
    let n = bits.len();
    let mut values = Vec::with_capacity(n * n);
    for &a in bits {
        values.extend(bits.iter().map(|&b| if a == b { 0.0 } else { NEG_LARGE }));
    }
    AttentionBias {
        rows: n,
        cols: n,
        values,
    }
}

/// Row-wise softmax of `(q k^T + bias) / sqrt(scale_dim)` in `f64`.
///
/// `q` is `n x d`, `k` is `l x d`, both row-major. This is the kernel shared
/// by the public tensor API and the denoiser.
pub(crate) fn attention_probs(
    q: &[f64],
    k: &[f64],
    n: usize,
    l: usize,
    d: usize,
    scale_dim: f64,
    bias: Option<&[f32]>,
) -> Vec<f64> {
    let inv = 1.0 / libm::sqrt(scale_dim);
    let mut out = alloc::vec![0.0f64; n * l];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut out[i * l..(i + 1) * l];
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            let mut dot = 0.0;
            for (a, b) in qi.iter().zip(kj) {
                dot += a * b;
            }
            if let Some(bias) = bias {
                dot += bias[i * l + j] as f64;
            }
            *r = dot * inv;
        }
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Rectified attention map `softmax((Q K^T + bias) / sqrt(d))`, `N x L`.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    bias: &AttentionBias,
    d: usize,
) -> Result<Tensor> {
    let (n, dq) = q.matrix_dims()?;
    let (l, dk) = k.matrix_dims()?;
    if dq != dk {
        return Err(shape_err!("Q has {dq} columns but K has {dk}"));
    }
    if bias.rows != n || bias.cols != l {
        return Err(shape_err!(
            "bias is {}x{} but logits are {n}x{l}",
            bias.rows,
            bias.cols
        ));
    }
    if d == 0 {
        return Err(domain_err!("key dimension must be positive"));
    }
    let probs = attention_probs(
        &q.to_f64(),
        &k.to_f64(),
        n,
        l,
        dq,
        d as f64,
        Some(&bias.values),
    );
    Tensor::from_f64(&[n, l], &probs)
}

/// Unrectified scaled dot-product attention map, for comparison.
pub fn plain_attention(q: &Tensor, k: &Tensor, d: usize) -> Result<Tensor> {
    let (n, _) = q.matrix_dims()?;
    let (l, _) = k.matrix_dims()?;
    masked_attention(q, k, &AttentionBias::zeros(n, l), d)
}

/// `A V` for an `N x L` attention map and `L x d_v` values.
pub fn apply_attention(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, l) = a.matrix_dims()?;
    let (lv, dv) = v.matrix_dims()?;
    if l != lv {
        return Err(shape_err!("attention has {l} columns but V has {lv} rows"));
    }
    let (ad, vd) = (a.data(), v.data());
    let mut out = alloc::vec![0.0f64; n * dv];
    for i in 0..n {
        let row = &mut out[i * dv..(i + 1) * dv];
        for j in 0..l {
            let w = ad[i * l + j] as f64;
            if w == 0.0 {
                continue;
            }
            for (o, &x) in row.iter_mut().zip(&vd[j * dv..(j + 1) * dv]) {
                *o += w * x as f64;
            }
        }
    }
    Tensor::from_f64(&[n, dv], &out)
}
