//! Multi-head self-attention over time frames.
//!
//! The bottleneck map `(batch, freq, time, channels)` is read as one token
//! per time frame whose feature vector is the flattened `(freq, channels)`
//! slice. Each head attends with scaled dot products, heads are
//! concatenated and projected back to the feature size, and the input
//! tokens are added back.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub key_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { heads: 4, key_dim: 32 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.key_dim == 0 {
            return Err(Error::Config("attention heads and key_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Width of the concatenated heads.
    pub fn inner_dim(&self) -> usize {
        self.heads * self.key_dim
    }
}

/// Borrowed projection parameters. Matrices are row-major; `query`, `key`
/// and `value` map `model_dim -> heads * key_dim`, `output` maps back.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub query: &'a [f64],
    pub query_bias: &'a [f64],
    pub key: &'a [f64],
    pub key_bias: &'a [f64],
    pub value: &'a [f64],
    pub value_bias: &'a [f64],
    pub output: &'a [f64],
    pub output_bias: &'a [f64],
}

/// Forward intermediates for one batch element.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub tokens: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Softmax weights, `heads x time x time`.
    pub probs: Vec<f64>,
    pub heads_out: Vec<f64>,
}

/// Gradients with respect to the projections, same order as
/// [`AttentionWeights`].
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub query: Vec<f64>,
    pub query_bias: Vec<f64>,
    pub key: Vec<f64>,
    pub key_bias: Vec<f64>,
    pub value: Vec<f64>,
    pub value_bias: Vec<f64>,
    pub output: Vec<f64>,
    pub output_bias: Vec<f64>,
}

impl AttentionGrads {
    fn zeros(model_dim: usize, inner: usize) -> Self {
        Self {
            query: vec![0.0; model_dim * inner],
            query_bias: vec![0.0; inner],
            key: vec![0.0; model_dim * inner],
            key_bias: vec![0.0; inner],
            value: vec![0.0; model_dim * inner],
            value_bias: vec![0.0; inner],
            output: vec![0.0; inner * model_dim],
            output_bias: vec![0.0; model_dim],
        }
    }
}

/// `a (m x k) * b (k x n) + bias`.
fn affine(a: &[f64], b: &[f64], bias: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        out.extend_from_slice(bias);
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * w;
            }
        }
    }
    out
}

/// Accumulates `a^T (m x k)^T * g (m x n)` into `out (k x n)`.
fn accumulate_at_b(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += x * gv;
            }
        }
    }
}

/// Accumulates `g (m x n) * w^T` into `out (m x k)` for `w (k x n)`.
fn accumulate_a_bt(out: &mut [f64], g: &[f64], w: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let dot: f64 = grow.iter().zip(&w[p * n..(p + 1) * n]).map(|(a, b)| a * b).sum();
            out[i * k + p] += dot;
        }
    }
}

fn column_sums(out: &mut [f64], g: &[f64], n: usize) {
    for row in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn gather_tokens(x: &Tensor, b: usize) -> Vec<f64> {
    let [_, nf, nt, nc] = x.shape();
    let mut tokens = vec![0.0; nt * nf * nc];
    for t in 0..nt {
        for f in 0..nf {
            tokens[t * nf * nc + f * nc..t * nf * nc + (f + 1) * nc].copy_from_slice(x.pixel(b, f, t));
        }
    }
    tokens
}

fn scatter_tokens(x: &mut Tensor, b: usize, tokens: &[f64]) {
    let [_, nf, nt, nc] = x.shape();
    for t in 0..nt {
        for f in 0..nf {
            x.pixel_mut(b, f, t)
                .copy_from_slice(&tokens[t * nf * nc + f * nc..t * nf * nc + (f + 1) * nc]);
        }
    }
}

fn check_weights(w: &AttentionWeights<'_>, model_dim: usize, inner: usize) -> Result<()> {
    let expect = [
        ("query", w.query.len(), model_dim * inner),
        ("query bias", w.query_bias.len(), inner),
        ("key", w.key.len(), model_dim * inner),
        ("key bias", w.key_bias.len(), inner),
        ("value", w.value.len(), model_dim * inner),
        ("value bias", w.value_bias.len(), inner),
        ("output", w.output.len(), inner * model_dim),
        ("output bias", w.output_bias.len(), model_dim),
    ];
    for (name, got, want) in expect {
        if got != want {
            return Err(Error::invalid(format!(
                "attention {name} has {got} values; token features {model_dim} with {inner} inner dims need {want}"
            )));
        }
    }
    Ok(())
}

/// Attention forward pass that also returns per-batch caches.
pub fn multi_head_attention_traced(
    input: &Tensor,
    cfg: &AttentionConfig,
    w: &AttentionWeights<'_>,
) -> Result<(Tensor, Vec<AttentionCache>)> {
    cfg.validate()?;
    let [nb, nf, nt, nc] = input.shape();
    let d = nf * nc;
    let inner = cfg.inner_dim();
    check_weights(w, d, inner)?;
    let dk = cfg.key_dim;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Tensor::zeros(input.shape());
    let mut caches = Vec::with_capacity(nb);
    for b in 0..nb {
        let tokens = gather_tokens(input, b);
        let q = affine(&tokens, w.query, w.query_bias, nt, d, inner);
        let k = affine(&tokens, w.key, w.key_bias, nt, d, inner);
        let v = affine(&tokens, w.value, w.value_bias, nt, d, inner);
        let mut probs = vec![0.0; cfg.heads * nt * nt];
        let mut heads_out = vec![0.0; nt * inner];
        for h in 0..cfg.heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..nt {
                let qi = &q[i * inner + cols.start..i * inner + cols.end];
                let row = &mut probs[(h * nt + i) * nt..(h * nt + i + 1) * nt];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[j * inner + cols.start..j * inner + cols.end];
                    *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                let oi = &mut heads_out[i * inner + cols.start..i * inner + cols.end];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v[j * inner + cols.start..j * inner + cols.end];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let mut y = affine(&heads_out, w.output, w.output_bias, nt, inner, d);
        for (yv, x) in y.iter_mut().zip(&tokens) {
            *yv += x;
        }
        scatter_tokens(&mut out, b, &y);
        caches.push(AttentionCache {
            tokens,
            q,
            k,
            v,
            probs,
            heads_out,
        });
    }
    Ok((out, caches))
}

pub fn multi_head_attention(input: &Tensor, cfg: &AttentionConfig, w: &AttentionWeights<'_>) -> Result<Tensor> {
    Ok(multi_head_attention_traced(input, cfg, w)?.0)
}

/// Gradients of [`multi_head_attention`] given its caches.
pub fn multi_head_attention_backward(
    input_shape: [usize; 4],
    cfg: &AttentionConfig,
    w: &AttentionWeights<'_>,
    caches: &[AttentionCache],
    grad_out: &Tensor,
) -> Result<(Tensor, AttentionGrads)> {
    let [nb, nf, nt, nc] = input_shape;
    let d = nf * nc;
    let inner = cfg.inner_dim();
    let dk = cfg.key_dim;
    let scale = 1.0 / (dk as f64).sqrt();
    if caches.len() != nb || grad_out.shape() != input_shape {
        return Err(Error::invalid("attention gradient does not match the forward pass"));
    }
    let mut grads = AttentionGrads::zeros(d, inner);
    let mut g_in = Tensor::zeros(input_shape);
    for (b, c) in caches.iter().enumerate() {
        let g_y = gather_tokens(grad_out, b);
        // Residual path.
        let mut g_tokens = g_y.clone();

        accumulate_at_b(&mut grads.output, &c.heads_out, &g_y, nt, inner, d);
        column_sums(&mut grads.output_bias, &g_y, d);
        let mut g_heads = vec![0.0; nt * inner];
        accumulate_a_bt(&mut g_heads, &g_y, w.output, nt, inner, d);

        let mut g_q = vec![0.0; nt * inner];
        let mut g_k = vec![0.0; nt * inner];
        let mut g_v = vec![0.0; nt * inner];
        let mut g_p = vec![0.0; nt];
        for h in 0..cfg.heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..nt {
                let p = &c.probs[(h * nt + i) * nt..(h * nt + i + 1) * nt];
                let go = &g_heads[i * inner + cols.start..i * inner + cols.end];
                for (j, gp) in g_p.iter_mut().enumerate() {
                    let vj = &c.v[j * inner + cols.start..j * inner + cols.end];
                    *gp = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let gv = &mut g_v[j * inner + cols.start..j * inner + cols.end];
                    for (g, &o) in gv.iter_mut().zip(go) {
                        *g += p[j] * o;
                    }
                }
                let dot: f64 = p.iter().zip(&g_p).map(|(a, b)| a * b).sum();
                for j in 0..nt {
                    let gs = p[j] * (g_p[j] - dot) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    for col in cols.clone() {
                        g_q[i * inner + col] += gs * c.k[j * inner + col];
                        g_k[j * inner + col] += gs * c.q[i * inner + col];
                    }
                }
            }
        }
        for (g, wm, gw, gb) in [
            (&g_q, w.query, &mut grads.query, &mut grads.query_bias),
            (&g_k, w.key, &mut grads.key, &mut grads.key_bias),
            (&g_v, w.value, &mut grads.value, &mut grads.value_bias),
        ] {
            accumulate_at_b(gw, &c.tokens, g, nt, d, inner);
            column_sums(gb, g, inner);
            accumulate_a_bt(&mut g_tokens, g, wm, nt, d, inner);
        }
        scatter_tokens(&mut g_in, b, &g_tokens);
    }
    Ok((g_in, grads))
}
