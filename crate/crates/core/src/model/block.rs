//! Pre-LN transformer block with rotary self-attention:
//!
//! ```text
//! x1 = x  + Wo · Attn(RoPE(Wq·LN1(x)), RoPE(Wk·LN1(x)), Wv·LN1(x))
//! y  = x1 + W2 · GELU(W1·LN2(x1))
//! ```
//!
//! Keys at invalid (padding) positions get `-inf` logits, and padding rows
//! of the output are forced to zero.

use super::ops::{
    axpy, dot, gelu, gelu_grad, layer_norm_backward, layer_norm_forward, linear_backward, linear_forward,
    rope_in_place, LayerNormCache,
};
use super::params::BlockParams;

/// Per-token layout: `rows` tokens of width `d`, each with a position and a validity flag.
#[derive(Debug, Clone, Copy)]
pub struct SeqShape<'a> {
    pub rows: usize,
    pub d: usize,
    pub heads: usize,
    pub positions: &'a [f64],
    pub valid: &'a [bool],
}

impl SeqShape<'_> {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

pub struct BlockCache {
    ln1: LayerNormCache,
    a: Vec<f64>,
    q_rot: Vec<f64>,
    k_rot: Vec<f64>,
    v: Vec<f64>,
    /// `heads x rows x rows` attention weights.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LayerNormCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

impl BlockCache {
    /// Attention weights of head `h`, row-major `rows x rows`.
    pub fn attention(&self, h: usize, rows: usize) -> &[f64] {
        &self.probs[h * rows * rows..(h + 1) * rows * rows]
    }
}

fn rotate_heads(m: &mut [f64], shape: &SeqShape<'_>, direction: f64) {
    let dh = shape.head_dim();
    for t in 0..shape.rows {
        for h in 0..shape.heads {
            let off = t * shape.d + h * dh;
            rope_in_place(&mut m[off..off + dh], shape.positions[t], direction);
        }
    }
}

/// Raw attention logits `q_i · k_j / sqrt(d_k)` for head `h`, before masking.
pub fn attention_logits(params: &BlockParams, x: &[f64], shape: &SeqShape<'_>, h: usize) -> Vec<f64> {
    let (a, _) = layer_norm_forward(&params.ln1, x, shape.rows);
    let mut q = linear_forward(&params.wq, &a, shape.rows);
    let mut k = linear_forward(&params.wk, &a, shape.rows);
    rotate_heads(&mut q, shape, 1.0);
    rotate_heads(&mut k, shape, 1.0);
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; shape.rows * shape.rows];
    for i in 0..shape.rows {
        for j in 0..shape.rows {
            let qi = &q[i * shape.d + h * dh..i * shape.d + (h + 1) * dh];
            let kj = &k[j * shape.d + h * dh..j * shape.d + (h + 1) * dh];
            out[i * shape.rows + j] = dot(qi, kj) * scale;
        }
    }
    out
}

pub fn block_forward(params: &BlockParams, x: &[f64], shape: &SeqShape<'_>) -> (Vec<f64>, BlockCache) {
    let (rows, d, heads) = (shape.rows, shape.d, shape.heads);
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layer_norm_forward(&params.ln1, x, rows);
    let mut q_rot = linear_forward(&params.wq, &a, rows);
    let mut k_rot = linear_forward(&params.wk, &a, rows);
    let v = linear_forward(&params.wv, &a, rows);
    rotate_heads(&mut q_rot, shape, 1.0);
    rotate_heads(&mut k_rot, shape, 1.0);

    let mut probs = vec![0.0; heads * rows * rows];
    let mut ctx = vec![0.0; rows * d];
    for h in 0..heads {
        for i in 0..rows {
            let qi = &q_rot[i * d + h * dh..i * d + (h + 1) * dh];
            let row = &mut probs[(h * rows + i) * rows..(h * rows + i + 1) * rows];
            let mut max = f64::NEG_INFINITY;
            for j in 0..rows {
                row[j] = if shape.valid[j] {
                    dot(qi, &k_rot[j * d + h * dh..j * d + (h + 1) * dh]) * scale
                } else {
                    f64::NEG_INFINITY
                };
                max = max.max(row[j]);
            }
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = if p.is_finite() { (*p - max).exp() } else { 0.0 };
                sum += *p;
            }
            let ci = &mut ctx[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..rows {
                row[j] /= sum;
                if row[j] != 0.0 {
                    axpy(row[j], &v[j * d + h * dh..j * d + (h + 1) * dh], ci);
                }
            }
        }
    }

    let attn_out = linear_forward(&params.wo, &ctx, rows);
    let mut x1: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
    zero_invalid(&mut x1, shape);

    let (c, ln2) = layer_norm_forward(&params.ln2, &x1, rows);
    let u = linear_forward(&params.fc1, &c, rows);
    let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
    let f = linear_forward(&params.fc2, &g, rows);
    let mut y: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
    zero_invalid(&mut y, shape);

    let cache = BlockCache {
        ln1,
        a,
        q_rot,
        k_rot,
        v,
        probs,
        ctx,
        ln2,
        c,
        u,
        g,
    };
    (y, cache)
}

fn zero_invalid(m: &mut [f64], shape: &SeqShape<'_>) {
    for (t, &ok) in shape.valid.iter().enumerate() {
        if !ok {
            m[t * shape.d..(t + 1) * shape.d].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Accumulates parameter gradients into `grad` and returns `d loss / d x`.
pub fn block_backward(
    params: &BlockParams,
    grad: &mut BlockParams,
    cache: &BlockCache,
    dy: &[f64],
    shape: &SeqShape<'_>,
) -> Vec<f64> {
    let (rows, d, heads) = (shape.rows, shape.d, shape.heads);
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dy = dy.to_vec();
    zero_invalid(&mut dy, shape);

    // Feed-forward branch.
    let dg = linear_backward(&params.fc2, &mut grad.fc2, &cache.g, &dy, rows);
    let du: Vec<f64> = dg.iter().zip(&cache.u).map(|(g, &u)| g * gelu_grad(u)).collect();
    let dc = linear_backward(&params.fc1, &mut grad.fc1, &cache.c, &du, rows);
    let dx1_ln = layer_norm_backward(&params.ln2, &mut grad.ln2, &cache.ln2, &dc, rows);
    let mut dx1: Vec<f64> = dy.iter().zip(&dx1_ln).map(|(a, b)| a + b).collect();
    zero_invalid(&mut dx1, shape);

    // Attention branch.
    let dctx = linear_backward(&params.wo, &mut grad.wo, &cache.ctx, &dx1, rows);
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = vec![0.0; rows];
    for h in 0..heads {
        for i in 0..rows {
            let p = &cache.probs[(h * rows + i) * rows..(h * rows + i + 1) * rows];
            let dci = &dctx[i * d + h * dh..i * d + (h + 1) * dh];
            let mut weighted = 0.0;
            for j in 0..rows {
                if p[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = j * d + h * dh;
                dp[j] = dot(dci, &cache.v[vj..vj + dh]);
                weighted += p[j] * dp[j];
                axpy(p[j], dci, &mut dv[vj..vj + dh]);
            }
            let qi = i * d + h * dh;
            for j in 0..rows {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                let kj = j * d + h * dh;
                axpy(ds, &cache.k_rot[kj..kj + dh], &mut dq[qi..qi + dh]);
                axpy(ds, &cache.q_rot[qi..qi + dh], &mut dk[kj..kj + dh]);
            }
        }
    }
    rotate_heads(&mut dq, shape, -1.0);
    rotate_heads(&mut dk, shape, -1.0);

    let mut da = linear_backward(&params.wq, &mut grad.wq, &cache.a, &dq, rows);
    let da_k = linear_backward(&params.wk, &mut grad.wk, &cache.a, &dk, rows);
    let da_v = linear_backward(&params.wv, &mut grad.wv, &cache.a, &dv, rows);
    for ((a, k), v) in da.iter_mut().zip(&da_k).zip(&da_v) {
        *a += k + v;
    }
    let dx_ln = layer_norm_backward(&params.ln1, &mut grad.ln1, &cache.ln1, &da, rows);
    let mut dx: Vec<f64> = dx1.iter().zip(&dx_ln).map(|(a, b)| a + b).collect();
    zero_invalid(&mut dx, shape);
    dx
}
