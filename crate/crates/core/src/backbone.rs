//! Mini transformer encoder used as the frozen embedding function.
//!
//! Architecture: learned class token at position 0, a linear projection of the
//! data tokens, learned positional embeddings, then a stack of pre-layer-norm
//! blocks (LN -> multi-head attention -> residual, LN -> feed-forward ->
//! residual) and a final layer norm. The embedding of an input is the class
//! token row after the final norm.
//!
//! Task prompts are injected per layer: block i consumes [c, p_i, e] and its
//! prompt output rows are discarded, so every layer sees a fresh learned
//! prompt rather than a propagated token. Reverse mode runs back through the
//! whole stack; prompt gradients fall out at each layer's injection point,
//! and backbone weight gradients are materialized only when explicitly
//! requested (pretraining). Prompt training never allocates them.

use crate::binio;
use crate::error::{CppError, Result};
use crate::linalg::{col_sums, matmul, matmul_a_bt, matmul_at_b, Matrix, Vector};
use crate::rng::SplitRng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const LN_EPS: f64 = 1e-5;
const BACKBONE_MAGIC: &[u8; 4] = b"CPPB";
const BACKBONE_VERSION: u32 = 1;

/// Range half-width for seeded prompt initialization.
pub const PROMPT_INIT_RANGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub mlp_hidden: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.embed_dim == 0
            || self.num_heads == 0
            || self.seq_len == 0
            || self.mlp_hidden == 0
        {
            return Err(CppError::Config(
                "backbone config fields must be positive".into(),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(CppError::Config(format!(
                "num_heads {} must divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Vector,
    pub ln1_beta: Vector,
    pub w_q: Matrix,
    pub b_q: Vector,
    pub w_k: Matrix,
    pub b_k: Vector,
    pub w_v: Matrix,
    pub b_v: Vector,
    pub w_o: Matrix,
    pub b_o: Vector,
    pub ln2_gamma: Vector,
    pub ln2_beta: Vector,
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub input_proj: Matrix,
    pub input_bias: Vector,
    pub class_token: Vector,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Vector,
    pub final_beta: Vector,
    frozen: bool,
    pretrain_class_ids: Vec<u32>,
}

/// Data tokens fed to the encoder: seq_len rows of embed_dim features.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Matrix,
}

impl TokenSequence {
    pub fn new(tokens: Matrix) -> Self {
        TokenSequence { tokens }
    }
}

/// Per-task learnable prompt: one L_p x D matrix per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub task_id: u32,
    pub tokens: Vec<Matrix>,
}

impl PromptSet {
    /// Seeded uniform init in [-PROMPT_INIT_RANGE, PROMPT_INIT_RANGE].
    pub fn init(task_id: u32, config: &BackboneConfig, prompt_len: usize, rng: &mut SplitRng) -> Result<Self> {
        if prompt_len == 0 {
            return Err(CppError::Config(
                "trainable prompt length must be at least 1".into(),
            ));
        }
        let mut tokens = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let mut m = Matrix::zeros(prompt_len, config.embed_dim);
            for v in m.as_mut_slice() {
                *v = rng.uniform_range(-PROMPT_INIT_RANGE, PROMPT_INIT_RANGE);
            }
            tokens.push(m);
        }
        Ok(PromptSet { task_id, tokens })
    }

    /// Zero-length prompt at every layer; encoding with it equals the
    /// prompt-free path. Used by the training-free baseline.
    pub fn empty(task_id: u32, num_layers: usize, embed_dim: usize) -> Self {
        PromptSet {
            task_id,
            tokens: (0..num_layers).map(|_| Matrix::zeros(0, embed_dim)).collect(),
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.tokens.first().map_or(0, |m| m.rows())
    }

    pub fn param_count(&self) -> usize {
        self.tokens.iter().map(|m| m.rows() * m.cols()).sum()
    }
}

struct LayerTrace {
    ln1_hat: Matrix,
    ln1_inv_std: Vec<f64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// One T x T row-stochastic matrix per head.
    attn_probs: Vec<Matrix>,
    /// Head outputs packed side by side: T x D.
    attn_concat: Matrix,
    ln2_hat: Matrix,
    ln2_inv_std: Vec<f64>,
    ffn_pre: Matrix,
    ffn_act: Matrix,
}

/// Cached activations from one encode call, consumed by the backward pass.
pub struct ForwardTrace {
    config: BackboneConfig,
    prompt_len: usize,
    /// Raw data tokens, kept for input-projection weight gradients.
    tokens_raw: Matrix,
    layers: Vec<LayerTrace>,
    final_hat: Vector,
    final_inv_std: f64,
}

impl ForwardTrace {
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }
}

/// Gradients for every backbone tensor, same shapes as the weights.
/// Only the pretraining path ever constructs one.
pub struct BackboneGrads {
    pub input_proj: Matrix,
    pub input_bias: Vector,
    pub class_token: Vector,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerGrads>,
    pub final_gamma: Vector,
    pub final_beta: Vector,
}

pub struct LayerGrads {
    pub ln1_gamma: Vector,
    pub ln1_beta: Vector,
    pub w_q: Matrix,
    pub b_q: Vector,
    pub w_k: Matrix,
    pub b_k: Vector,
    pub w_v: Matrix,
    pub b_v: Vector,
    pub w_o: Matrix,
    pub b_o: Vector,
    pub ln2_gamma: Vector,
    pub ln2_beta: Vector,
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

impl BackboneGrads {
    fn zeros(config: &BackboneConfig) -> Self {
        let d = config.embed_dim;
        let m = config.mlp_hidden;
        let layer = || LayerGrads {
            ln1_gamma: Vector::zeros(d),
            ln1_beta: Vector::zeros(d),
            w_q: Matrix::zeros(d, d),
            b_q: Vector::zeros(d),
            w_k: Matrix::zeros(d, d),
            b_k: Vector::zeros(d),
            w_v: Matrix::zeros(d, d),
            b_v: Vector::zeros(d),
            w_o: Matrix::zeros(d, d),
            b_o: Vector::zeros(d),
            ln2_gamma: Vector::zeros(d),
            ln2_beta: Vector::zeros(d),
            w1: Matrix::zeros(d, m),
            b1: Vector::zeros(m),
            w2: Matrix::zeros(m, d),
            b2: Vector::zeros(d),
        };
        BackboneGrads {
            input_proj: Matrix::zeros(d, d),
            input_bias: Vector::zeros(d),
            class_token: Vector::zeros(d),
            pos_embed: Matrix::zeros(1 + config.seq_len, d),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            final_gamma: Vector::zeros(d),
            final_beta: Vector::zeros(d),
        }
    }

    /// Accumulate another gradient in place.
    pub fn add_assign(&mut self, other: &BackboneGrads) {
        fn addm(a: &mut Matrix, b: &Matrix) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        fn addv(a: &mut Vector, b: &Vector) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        addm(&mut self.input_proj, &other.input_proj);
        addv(&mut self.input_bias, &other.input_bias);
        addv(&mut self.class_token, &other.class_token);
        addm(&mut self.pos_embed, &other.pos_embed);
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            addm(&mut a.w_q, &b.w_q);
            addv(&mut a.b_q, &b.b_q);
            addm(&mut a.w_k, &b.w_k);
            addv(&mut a.b_k, &b.b_k);
            addm(&mut a.w_v, &b.w_v);
            addv(&mut a.b_v, &b.b_v);
            addm(&mut a.w_o, &b.w_o);
            addv(&mut a.b_o, &b.b_o);
            addv(&mut a.ln1_gamma, &b.ln1_gamma);
            addv(&mut a.ln1_beta, &b.ln1_beta);
            addv(&mut a.ln2_gamma, &b.ln2_gamma);
            addv(&mut a.ln2_beta, &b.ln2_beta);
            addm(&mut a.w1, &b.w1);
            addv(&mut a.b1, &b.b1);
            addm(&mut a.w2, &b.w2);
            addv(&mut a.b2, &b.b2);
        }
        addv(&mut self.final_gamma, &other.final_gamma);
        addv(&mut self.final_beta, &other.final_beta);
    }

    /// Flat views over every tensor, in the same order as
    /// BackboneWeights::tensors_mut.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.input_proj.as_slice(),
            self.input_bias.as_slice(),
            self.class_token.as_slice(),
            self.pos_embed.as_slice(),
        ];
        for l in &self.layers {
            out.push(l.ln1_gamma.as_slice());
            out.push(l.ln1_beta.as_slice());
            out.push(l.w_q.as_slice());
            out.push(l.b_q.as_slice());
            out.push(l.w_k.as_slice());
            out.push(l.b_k.as_slice());
            out.push(l.w_v.as_slice());
            out.push(l.b_v.as_slice());
            out.push(l.w_o.as_slice());
            out.push(l.b_o.as_slice());
            out.push(l.ln2_gamma.as_slice());
            out.push(l.ln2_beta.as_slice());
            out.push(l.w1.as_slice());
            out.push(l.b1.as_slice());
            out.push(l.w2.as_slice());
            out.push(l.b2.as_slice());
        }
        out.push(self.final_gamma.as_slice());
        out.push(self.final_beta.as_slice());
        out
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise layer norm. Returns (output, normalized rows, per-row 1/std).
fn ln_rows(x: &Matrix, gamma: &Vector, beta: &Vector) -> (Matrix, Matrix, Vec<f64>) {
    let (t, d) = (x.rows(), x.cols());
    let mut y = Matrix::zeros(t, d);
    let mut hat = Matrix::zeros(t, d);
    let mut inv_std = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let h = (row[c] - mean) * inv;
            hat.set(r, c, h);
            y.set(r, c, gamma[c] * h + beta[c]);
        }
    }
    (y, hat, inv_std)
}

/// Input gradient of row-wise layer norm given the output gradient.
fn ln_rows_backward(dy: &Matrix, hat: &Matrix, inv_std: &[f64], gamma: &Vector) -> Matrix {
    let (t, d) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(t, d);
    for r in 0..t {
        let gr = dy.row(r);
        let hr = hat.row(r);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        let mut gh = vec![0.0; d];
        for c in 0..d {
            gh[c] = gr[c] * gamma[c];
            m1 += gh[c];
            m2 += gh[c] * hr[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for c in 0..d {
            dx.set(r, c, inv_std[r] * (gh[c] - m1 - hr[c] * m2));
        }
    }
    dx
}

/// gamma/beta gradients of row-wise layer norm.
fn ln_rows_weight_grads(dy: &Matrix, hat: &Matrix, dgamma: &mut Vector, dbeta: &mut Vector) {
    for r in 0..dy.rows() {
        let gr = dy.row(r);
        let hr = hat.row(r);
        for c in 0..dy.cols() {
            dgamma[c] += gr[c] * hr[c];
            dbeta[c] += gr[c];
        }
    }
}

/// x W + b over rows.
fn linear(x: &Matrix, w: &Matrix, b: &Vector) -> Matrix {
    let mut y = matmul(x, w);
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        for c in 0..row.len() {
            row[c] += b[c];
        }
    }
    y
}

fn layer_forward_traced(
    layer: &LayerWeights,
    num_heads: usize,
    seq_in: &Matrix,
) -> (LayerTrace, Matrix) {
    let t = seq_in.rows();
    let d = seq_in.cols();
    let hd = d / num_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let (ln1_out, ln1_hat, ln1_inv_std) = ln_rows(seq_in, &layer.ln1_gamma, &layer.ln1_beta);
    let q = linear(&ln1_out, &layer.w_q, &layer.b_q);
    let k = linear(&ln1_out, &layer.w_k, &layer.b_k);
    let v = linear(&ln1_out, &layer.w_v, &layer.b_v);

    let mut attn_probs = Vec::with_capacity(num_heads);
    let mut attn_concat = Matrix::zeros(t, d);
    for h in 0..num_heads {
        let off = h * hd;
        let mut probs = Matrix::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[off..off + hd];
            let mut scores = vec![0.0; t];
            let mut max = f64::NEG_INFINITY;
            for j in 0..t {
                let kj = &k.row(j)[off..off + hd];
                let mut s = 0.0;
                for c in 0..hd {
                    s += qi[c] * kj[c];
                }
                s *= scale;
                scores[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            let prow = probs.row_mut(i);
            for j in 0..t {
                prow[j] = scores[j] / denom;
            }
        }
        for i in 0..t {
            let prow = probs.row(i);
            for j in 0..t {
                let p = prow[j];
                if p == 0.0 {
                    continue;
                }
                let vj = &v.row(j)[off..off + hd];
                for c in 0..hd {
                    let cur = attn_concat.get(i, off + c);
                    attn_concat.set(i, off + c, cur + p * vj[c]);
                }
            }
        }
        attn_probs.push(probs);
    }

    let attn_out = linear(&attn_concat, &layer.w_o, &layer.b_o);
    let mut h_mat = (*seq_in).clone();
    for (x, y) in h_mat.as_mut_slice().iter_mut().zip(attn_out.as_slice()) {
        *x += y;
    }

    let (ln2_out, ln2_hat, ln2_inv_std) = ln_rows(&h_mat, &layer.ln2_gamma, &layer.ln2_beta);
    let ffn_pre = linear(&ln2_out, &layer.w1, &layer.b1);
    let mut ffn_act = ffn_pre.clone();
    for x in ffn_act.as_mut_slice() {
        *x = gelu(*x);
    }
    let ffn_out = linear(&ffn_act, &layer.w2, &layer.b2);
    let mut out = h_mat.clone();
    for (x, y) in out.as_mut_slice().iter_mut().zip(ffn_out.as_slice()) {
        *x += y;
    }

    (
        LayerTrace {
            ln1_hat,
            ln1_inv_std,
            q,
            k,
            v,
            attn_probs,
            attn_concat,
            ln2_hat,
            ln2_inv_std,
            ffn_pre,
            ffn_act,
        },
        out,
    )
}

/// Backward through one block. Returns the gradient on seq_in; optionally
/// accumulates weight gradients.
fn layer_backward(
    layer: &LayerWeights,
    num_heads: usize,
    trace: &LayerTrace,
    d_out: &Matrix,
    mut grads: Option<&mut LayerGrads>,
) -> Matrix {
    let t = d_out.rows();
    let d = d_out.cols();
    let hd = d / num_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    // out = h + gelu(ln2(h) W1 + b1) W2 + b2
    let d_ffn_out = d_out;
    let d_act = matmul_a_bt(d_ffn_out, &layer.w2);
    let mut d_pre = d_act;
    for (g, p) in d_pre.as_mut_slice().iter_mut().zip(trace.ffn_pre.as_slice()) {
        *g *= gelu_prime(*p);
    }
    if let Some(g) = grads.as_deref_mut() {
        let dw2 = matmul_at_b(&trace.ffn_act, d_ffn_out);
        for (x, y) in g.w2.as_mut_slice().iter_mut().zip(dw2.as_slice()) {
            *x += y;
        }
        let db2 = col_sums(d_ffn_out);
        for (x, y) in g.b2.as_mut_slice().iter_mut().zip(db2.as_slice()) {
            *x += y;
        }
        // ln2 output is needed for W1 grads; rebuild it from the cached hat.
        let mut ln2_out = trace.ln2_hat.clone();
        for r in 0..t {
            let row = ln2_out.row_mut(r);
            for c in 0..d {
                row[c] = layer.ln2_gamma[c] * row[c] + layer.ln2_beta[c];
            }
        }
        let dw1 = matmul_at_b(&ln2_out, &d_pre);
        for (x, y) in g.w1.as_mut_slice().iter_mut().zip(dw1.as_slice()) {
            *x += y;
        }
        let db1 = col_sums(&d_pre);
        for (x, y) in g.b1.as_mut_slice().iter_mut().zip(db1.as_slice()) {
            *x += y;
        }
    }
    let d_ln2_out = matmul_a_bt(&d_pre, &layer.w1);
    if let Some(g) = grads.as_deref_mut() {
        ln_rows_weight_grads(&d_ln2_out, &trace.ln2_hat, &mut g.ln2_gamma, &mut g.ln2_beta);
    }
    let d_h_via_ffn = ln_rows_backward(&d_ln2_out, &trace.ln2_hat, &trace.ln2_inv_std, &layer.ln2_gamma);

    // dL/dh = residual path + ffn path
    let mut d_h = d_out.clone();
    for (x, y) in d_h.as_mut_slice().iter_mut().zip(d_h_via_ffn.as_slice()) {
        *x += y;
    }

    // h = seq_in + attn_concat W_o + b_o
    let d_attn_out = &d_h;
    let d_concat = matmul_a_bt(d_attn_out, &layer.w_o);
    if let Some(g) = grads.as_deref_mut() {
        let dwo = matmul_at_b(&trace.attn_concat, d_attn_out);
        for (x, y) in g.w_o.as_mut_slice().iter_mut().zip(dwo.as_slice()) {
            *x += y;
        }
        let dbo = col_sums(d_attn_out);
        for (x, y) in g.b_o.as_mut_slice().iter_mut().zip(dbo.as_slice()) {
            *x += y;
        }
    }

    let mut d_q = Matrix::zeros(t, d);
    let mut d_k = Matrix::zeros(t, d);
    let mut d_v = Matrix::zeros(t, d);
    for h in 0..num_heads {
        let off = h * hd;
        let probs = &trace.attn_probs[h];
        // dA[i][j] = sum_c dConcat[i][off+c] * V[j][off+c]
        let mut d_probs = Matrix::zeros(t, t);
        for i in 0..t {
            let dci = &d_concat.row(i)[off..off + hd];
            for j in 0..t {
                let vj = &trace.v.row(j)[off..off + hd];
                let mut acc = 0.0;
                for c in 0..hd {
                    acc += dci[c] * vj[c];
                }
                d_probs.set(i, j, acc);
            }
            // dV[j] += A[i][j] * dConcat[i]
            let prow = probs.row(i);
            for j in 0..t {
                let p = prow[j];
                if p == 0.0 {
                    continue;
                }
                let dvj = &mut d_v.row_mut(j)[off..off + hd];
                for c in 0..hd {
                    dvj[c] += p * dci[c];
                }
            }
        }
        // Softmax backward per row, then score gradients to Q and K.
        for i in 0..t {
            let prow = probs.row(i);
            let dprow = d_probs.row(i);
            let dot: f64 = prow.iter().zip(dprow.iter()).map(|(p, g)| p * g).sum();
            for j in 0..t {
                let ds = prow[j] * (dprow[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &trace.k.row(j)[off..off + hd];
                let dqi = &mut d_q.row_mut(i)[off..off + hd];
                for c in 0..hd {
                    dqi[c] += ds * kj[c];
                }
                let qi_start = i * d + off;
                let q_slice = &trace.q.as_slice()[qi_start..qi_start + hd];
                let dkj = &mut d_k.row_mut(j)[off..off + hd];
                for c in 0..hd {
                    dkj[c] += ds * q_slice[c];
                }
            }
        }
    }

    let mut d_ln1_out = matmul_a_bt(&d_q, &layer.w_q);
    let d_from_k = matmul_a_bt(&d_k, &layer.w_k);
    let d_from_v = matmul_a_bt(&d_v, &layer.w_v);
    for ((x, y), z) in d_ln1_out
        .as_mut_slice()
        .iter_mut()
        .zip(d_from_k.as_slice())
        .zip(d_from_v.as_slice())
    {
        *x += y + z;
    }
    if let Some(g) = grads.as_deref_mut() {
        let mut ln1_out = trace.ln1_hat.clone();
        for r in 0..t {
            let row = ln1_out.row_mut(r);
            for c in 0..d {
                row[c] = layer.ln1_gamma[c] * row[c] + layer.ln1_beta[c];
            }
        }
        let dwq = matmul_at_b(&ln1_out, &d_q);
        let dwk = matmul_at_b(&ln1_out, &d_k);
        let dwv = matmul_at_b(&ln1_out, &d_v);
        for (x, y) in g.w_q.as_mut_slice().iter_mut().zip(dwq.as_slice()) {
            *x += y;
        }
        for (x, y) in g.w_k.as_mut_slice().iter_mut().zip(dwk.as_slice()) {
            *x += y;
        }
        for (x, y) in g.w_v.as_mut_slice().iter_mut().zip(dwv.as_slice()) {
            *x += y;
        }
        let dbq = col_sums(&d_q);
        let dbk = col_sums(&d_k);
        let dbv = col_sums(&d_v);
        for (x, y) in g.b_q.as_mut_slice().iter_mut().zip(dbq.as_slice()) {
            *x += y;
        }
        for (x, y) in g.b_k.as_mut_slice().iter_mut().zip(dbk.as_slice()) {
            *x += y;
        }
        for (x, y) in g.b_v.as_mut_slice().iter_mut().zip(dbv.as_slice()) {
            *x += y;
        }
        ln_rows_weight_grads(&d_ln1_out, &trace.ln1_hat, &mut g.ln1_gamma, &mut g.ln1_beta);
    }
    let d_seq_via_attn =
        ln_rows_backward(&d_ln1_out, &trace.ln1_hat, &trace.ln1_inv_std, &layer.ln1_gamma);

    let mut d_seq = d_h;
    for (x, y) in d_seq.as_mut_slice().iter_mut().zip(d_seq_via_attn.as_slice()) {
        *x += y;
    }
    d_seq
}

/// One transformer block over [class, prompt, data tokens]; prompt output
/// rows are discarded, so the result is always (class', tokens').
pub fn layer_forward(
    layer: &LayerWeights,
    num_heads: usize,
    class_tok: &Vector,
    prompt: Option<&Matrix>,
    tokens: &TokenSequence,
) -> Result<(Vector, Matrix)> {
    let d = class_tok.dim();
    if tokens.tokens.cols() != d {
        return Err(CppError::Shape(format!(
            "token dim {} vs class token dim {}",
            tokens.tokens.cols(),
            d
        )));
    }
    if let Some(p) = prompt {
        if p.rows() > 0 && p.cols() != d {
            return Err(CppError::Shape(format!(
                "prompt dim {} vs embed dim {}",
                p.cols(),
                d
            )));
        }
    }
    if d % num_heads != 0 {
        return Err(CppError::Shape(format!(
            "num_heads {} must divide dim {}",
            num_heads, d
        )));
    }
    let lp = prompt.map_or(0, |p| p.rows());
    let le = tokens.tokens.rows();
    let t = 1 + lp + le;
    let mut seq = Matrix::zeros(t, d);
    seq.row_mut(0).copy_from_slice(class_tok.as_slice());
    if let Some(p) = prompt {
        for r in 0..lp {
            seq.row_mut(1 + r).copy_from_slice(p.row(r));
        }
    }
    for r in 0..le {
        seq.row_mut(1 + lp + r).copy_from_slice(tokens.tokens.row(r));
    }
    let (_, out) = layer_forward_traced(layer, num_heads, &seq);
    let class_out = Vector::from_vec(out.row(0).to_vec());
    let mut tok_out = Matrix::zeros(le, d);
    for r in 0..le {
        tok_out.row_mut(r).copy_from_slice(out.row(1 + lp + r));
    }
    Ok((class_out, tok_out))
}

impl BackboneWeights {
    /// Deterministic seeded initialization; weights start unfrozen so
    /// pretraining can update them.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitRng::from_seed_u64(seed).split("backbone-init", 0);
        let d = config.embed_dim;
        let mh = config.mlp_hidden;
        let xavier = |fan_in: usize, fan_out: usize, rows: usize, cols: usize, rng: &mut SplitRng| {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let mut m = Matrix::zeros(rows, cols);
            for v in m.as_mut_slice() {
                *v = rng.normal() * std;
            }
            m
        };
        let input_proj = xavier(d, d, d, d, &mut rng);
        let input_bias = Vector::zeros(d);
        let mut class_token = Vector::zeros(d);
        for v in class_token.as_mut_slice() {
            *v = rng.normal() * 0.02;
        }
        let mut pos_embed = Matrix::zeros(1 + config.seq_len, d);
        for v in pos_embed.as_mut_slice() {
            *v = rng.normal() * 0.02;
        }
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                ln1_gamma: Vector::from_vec(vec![1.0; d]),
                ln1_beta: Vector::zeros(d),
                w_q: xavier(d, d, d, d, &mut rng),
                b_q: Vector::zeros(d),
                w_k: xavier(d, d, d, d, &mut rng),
                b_k: Vector::zeros(d),
                w_v: xavier(d, d, d, d, &mut rng),
                b_v: Vector::zeros(d),
                w_o: xavier(d, d, d, d, &mut rng),
                b_o: Vector::zeros(d),
                ln2_gamma: Vector::from_vec(vec![1.0; d]),
                ln2_beta: Vector::zeros(d),
                w1: xavier(d, mh, d, mh, &mut rng),
                b1: Vector::zeros(mh),
                w2: xavier(mh, d, mh, d, &mut rng),
                b2: Vector::zeros(d),
            });
        }
        Ok(BackboneWeights {
            config,
            input_proj,
            input_bias,
            class_token,
            pos_embed,
            layers,
            final_gamma: Vector::from_vec(vec![1.0; d]),
            final_beta: Vector::zeros(d),
            frozen: false,
            pretrain_class_ids: Vec::new(),
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Irreversible: after this no weight update is accepted.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Class ids seen during pretraining, kept so later streams can be
    /// checked for overlap. Stored sorted and deduplicated.
    pub fn set_pretrain_class_ids(&mut self, mut ids: Vec<u32>) {
        ids.sort_unstable();
        ids.dedup();
        self.pretrain_class_ids = ids;
    }

    pub fn pretrain_class_ids(&self) -> &[u32] {
        &self.pretrain_class_ids
    }

    /// Mutable flat views over every tensor, for optimizer updates.
    /// Refused once frozen.
    pub fn tensors_mut(&mut self) -> Result<Vec<&mut [f64]>> {
        if self.frozen {
            return Err(CppError::Frozen(
                "attempted to update a frozen backbone".into(),
            ));
        }
        let mut out: Vec<&mut [f64]> = vec![
            self.input_proj.as_mut_slice(),
            self.input_bias.as_mut_slice(),
            self.class_token.as_mut_slice(),
            self.pos_embed.as_mut_slice(),
        ];
        for l in &mut self.layers {
            out.push(l.ln1_gamma.as_mut_slice());
            out.push(l.ln1_beta.as_mut_slice());
            out.push(l.w_q.as_mut_slice());
            out.push(l.b_q.as_mut_slice());
            out.push(l.w_k.as_mut_slice());
            out.push(l.b_k.as_mut_slice());
            out.push(l.w_v.as_mut_slice());
            out.push(l.b_v.as_mut_slice());
            out.push(l.w_o.as_mut_slice());
            out.push(l.b_o.as_mut_slice());
            out.push(l.ln2_gamma.as_mut_slice());
            out.push(l.ln2_beta.as_mut_slice());
            out.push(l.w1.as_mut_slice());
            out.push(l.b1.as_mut_slice());
            out.push(l.w2.as_mut_slice());
            out.push(l.b2.as_mut_slice());
        }
        out.push(self.final_gamma.as_mut_slice());
        out.push(self.final_beta.as_mut_slice());
        Ok(out)
    }

    fn check_prompts(&self, prompts: Option<&PromptSet>) -> Result<()> {
        if let Some(p) = prompts {
            if p.tokens.len() != self.config.num_layers {
                return Err(CppError::Config(format!(
                    "prompt set has {} layers, backbone has {}",
                    p.tokens.len(),
                    self.config.num_layers
                )));
            }
            let lp = p.prompt_len();
            for m in &p.tokens {
                if m.rows() != lp || (m.rows() > 0 && m.cols() != self.config.embed_dim) {
                    return Err(CppError::Shape(
                        "prompt matrices must share L_p x D shape".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Embed one input: class-token row after the final layer norm.
    /// With prompts == None this is the bare frozen-feature path.
    pub fn encode(
        &self,
        x: &TokenSequence,
        prompts: Option<&PromptSet>,
        want_trace: bool,
    ) -> Result<(Vector, Option<ForwardTrace>)> {
        self.check_prompts(prompts)?;
        let d = self.config.embed_dim;
        let le = self.config.seq_len;
        if x.tokens.rows() != le || x.tokens.cols() != d {
            return Err(CppError::Shape(format!(
                "input tokens {}x{}, expected {}x{}",
                x.tokens.rows(),
                x.tokens.cols(),
                le,
                d
            )));
        }
        let lp = prompts.map_or(0, |p| p.prompt_len());

        // Residual stream starts as [class token; projected tokens] + pos.
        let projected = linear(&x.tokens, &self.input_proj, &self.input_bias);
        let mut resid = Matrix::zeros(1 + le, d);
        for c in 0..d {
            resid.set(0, c, self.class_token[c] + self.pos_embed.get(0, c));
        }
        for r in 0..le {
            let prow = projected.row(r);
            let erow = resid.row_mut(1 + r);
            for c in 0..d {
                erow[c] = prow[c] + self.pos_embed.get(1 + r, c);
            }
        }

        let mut layer_traces = Vec::with_capacity(self.config.num_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let t = 1 + lp + le;
            let mut seq = Matrix::zeros(t, d);
            seq.row_mut(0).copy_from_slice(resid.row(0));
            if let Some(p) = prompts {
                for r in 0..lp {
                    seq.row_mut(1 + r).copy_from_slice(p.tokens[li].row(r));
                }
            }
            for r in 0..le {
                seq.row_mut(1 + lp + r).copy_from_slice(resid.row(1 + r));
            }
            let (trace, out) = layer_forward_traced(layer, self.config.num_heads, &seq);
            for c in 0..d {
                resid.set(0, c, out.get(0, c));
            }
            for r in 0..le {
                resid.row_mut(1 + r).copy_from_slice(out.row(1 + lp + r));
            }
            if want_trace {
                layer_traces.push(trace);
            }
        }

        let class_row = Matrix::from_vec(1, d, resid.row(0).to_vec()).expect("1xD");
        let (y, hat, inv) = ln_rows(&class_row, &self.final_gamma, &self.final_beta);
        let embedding = Vector::from_vec(y.row(0).to_vec());
        let trace = if want_trace {
            Some(ForwardTrace {
                config: self.config,
                prompt_len: lp,
                tokens_raw: x.tokens.clone(),
                layers: layer_traces,
                final_hat: Vector::from_vec(hat.row(0).to_vec()),
                final_inv_std: inv[0],
            })
        } else {
            None
        };
        Ok((embedding, trace))
    }

    /// Gradient of (grad_embedding . embedding) w.r.t. each layer's prompt
    /// rows. Backbone weight gradients are not materialized.
    pub fn backward_to_prompts(
        &self,
        trace: &ForwardTrace,
        grad_embedding: &Vector,
    ) -> Result<Vec<Matrix>> {
        let (prompt_grads, _) = self.backward_impl(trace, grad_embedding, false)?;
        Ok(prompt_grads)
    }

    /// Full reverse pass: prompt gradients plus gradients for every backbone
    /// tensor. The pretraining path is the only consumer of the weight part.
    pub fn backward_full(
        &self,
        trace: &ForwardTrace,
        grad_embedding: &Vector,
    ) -> Result<(Vec<Matrix>, BackboneGrads)> {
        let (prompt_grads, grads) = self.backward_impl(trace, grad_embedding, true)?;
        Ok((prompt_grads, grads.expect("weight grads requested")))
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace,
        grad_embedding: &Vector,
        want_weight_grads: bool,
    ) -> Result<(Vec<Matrix>, Option<BackboneGrads>)> {
        if trace.config != self.config || trace.layers.len() != self.config.num_layers {
            return Err(CppError::Trace(
                "trace does not match this backbone".into(),
            ));
        }
        if grad_embedding.dim() != self.config.embed_dim {
            return Err(CppError::Trace(format!(
                "grad dim {} vs embed dim {}",
                grad_embedding.dim(),
                self.config.embed_dim
            )));
        }
        let d = self.config.embed_dim;
        let le = self.config.seq_len;
        let lp = trace.prompt_len;
        let mut grads = want_weight_grads.then(|| BackboneGrads::zeros(&self.config));

        // Final layer norm backward on the class row.
        let dy = Matrix::from_vec(1, d, grad_embedding.as_slice().to_vec()).expect("1xD");
        let hat = Matrix::from_vec(1, d, trace.final_hat.as_slice().to_vec()).expect("1xD");
        if let Some(g) = grads.as_mut() {
            ln_rows_weight_grads(&dy, &hat, &mut g.final_gamma, &mut g.final_beta);
        }
        let d_class = ln_rows_backward(&dy, &hat, &[trace.final_inv_std], &self.final_gamma);

        // Gradient on the residual stream [class; data tokens].
        let mut d_resid = Matrix::zeros(1 + le, d);
        d_resid.row_mut(0).copy_from_slice(d_class.row(0));

        let mut prompt_grads: Vec<Matrix> = vec![Matrix::zeros(lp, d); self.config.num_layers];
        for li in (0..self.config.num_layers).rev() {
            let lt = &trace.layers[li];
            let t = 1 + lp + le;
            let mut d_out = Matrix::zeros(t, d);
            d_out.row_mut(0).copy_from_slice(d_resid.row(0));
            for r in 0..le {
                d_out.row_mut(1 + lp + r).copy_from_slice(d_resid.row(1 + r));
            }
            let layer_grads = grads.as_mut().map(|g| &mut g.layers[li]);
            let d_seq = layer_backward(&self.layers[li], self.config.num_heads, lt, &d_out, layer_grads);
            for r in 0..lp {
                prompt_grads[li].row_mut(r).copy_from_slice(d_seq.row(1 + r));
            }
            d_resid.row_mut(0).copy_from_slice(d_seq.row(0));
            for r in 0..le {
                d_resid.row_mut(1 + r).copy_from_slice(d_seq.row(1 + lp + r));
            }
        }

        if let Some(g) = grads.as_mut() {
            // Input stage: resid row 0 = class_token + pos[0]; data row r =
            // proj(tokens[r]) + pos[1 + r].
            for c in 0..d {
                g.class_token[c] += d_resid.get(0, c);
                g.pos_embed.set(0, c, g.pos_embed.get(0, c) + d_resid.get(0, c));
            }
            let mut d_proj_rows = Matrix::zeros(le, d);
            for r in 0..le {
                let drow = d_resid.row(1 + r);
                d_proj_rows.row_mut(r).copy_from_slice(drow);
                for c in 0..d {
                    g.pos_embed
                        .set(1 + r, c, g.pos_embed.get(1 + r, c) + drow[c]);
                }
            }
            let dwin = matmul_at_b(&trace.tokens_raw, &d_proj_rows);
            for (x, y) in g.input_proj.as_mut_slice().iter_mut().zip(dwin.as_slice()) {
                *x += y;
            }
            let dbin = col_sums(&d_proj_rows);
            for (x, y) in g.input_bias.as_mut_slice().iter_mut().zip(dbin.as_slice()) {
                *x += y;
            }
        }

        Ok((prompt_grads, grads))
    }

    /// SHA-256 over the serialized weights; the frozen-backbone tests compare
    /// this before and after training.
    pub fn checksum(&self) -> [u8; 32] {
        let mut buf = Vec::new();
        self.save_to_writer(&mut buf).expect("in-memory serialize");
        let digest = Sha256::digest(&buf);
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn save_to_writer<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, BACKBONE_MAGIC, BACKBONE_VERSION)?;
        binio::write_u32(w, self.config.num_layers as u32)?;
        binio::write_u32(w, self.config.embed_dim as u32)?;
        binio::write_u32(w, self.config.num_heads as u32)?;
        binio::write_u32(w, self.config.seq_len as u32)?;
        binio::write_u32(w, self.config.mlp_hidden as u32)?;
        binio::write_u8(w, self.frozen as u8)?;
        binio::write_u32(w, self.pretrain_class_ids.len() as u32)?;
        for id in &self.pretrain_class_ids {
            binio::write_u32(w, *id)?;
        }
        binio::write_f64_slice(w, self.input_proj.as_slice())?;
        binio::write_f64_slice(w, self.input_bias.as_slice())?;
        binio::write_f64_slice(w, self.class_token.as_slice())?;
        binio::write_f64_slice(w, self.pos_embed.as_slice())?;
        for l in &self.layers {
            binio::write_f64_slice(w, l.ln1_gamma.as_slice())?;
            binio::write_f64_slice(w, l.ln1_beta.as_slice())?;
            binio::write_f64_slice(w, l.w_q.as_slice())?;
            binio::write_f64_slice(w, l.b_q.as_slice())?;
            binio::write_f64_slice(w, l.w_k.as_slice())?;
            binio::write_f64_slice(w, l.b_k.as_slice())?;
            binio::write_f64_slice(w, l.w_v.as_slice())?;
            binio::write_f64_slice(w, l.b_v.as_slice())?;
            binio::write_f64_slice(w, l.w_o.as_slice())?;
            binio::write_f64_slice(w, l.b_o.as_slice())?;
            binio::write_f64_slice(w, l.ln2_gamma.as_slice())?;
            binio::write_f64_slice(w, l.ln2_beta.as_slice())?;
            binio::write_f64_slice(w, l.w1.as_slice())?;
            binio::write_f64_slice(w, l.b1.as_slice())?;
            binio::write_f64_slice(w, l.w2.as_slice())?;
            binio::write_f64_slice(w, l.b2.as_slice())?;
        }
        binio::write_f64_slice(w, self.final_gamma.as_slice())?;
        binio::write_f64_slice(w, self.final_beta.as_slice())?;
        Ok(())
    }

    pub fn load_from_reader<R: Read>(r: &mut R) -> Result<Self> {
        let version = binio::read_magic(r, BACKBONE_MAGIC)?;
        if version != BACKBONE_VERSION {
            return Err(CppError::Format(format!(
                "unsupported backbone version {}",
                version
            )));
        }
        let config = BackboneConfig {
            num_layers: binio::read_u32(r)? as usize,
            embed_dim: binio::read_u32(r)? as usize,
            num_heads: binio::read_u32(r)? as usize,
            seq_len: binio::read_u32(r)? as usize,
            mlp_hidden: binio::read_u32(r)? as usize,
        };
        config.validate()?;
        let frozen = binio::read_u8(r)? != 0;
        let num_pretrain = binio::read_u32(r)? as usize;
        let mut pretrain_class_ids = Vec::with_capacity(num_pretrain);
        for _ in 0..num_pretrain {
            pretrain_class_ids.push(binio::read_u32(r)?);
        }
        let d = config.embed_dim;
        let mh = config.mlp_hidden;
        let read_mat = |r: &mut R, rows: usize, cols: usize| -> Result<Matrix> {
            Matrix::from_vec(rows, cols, binio::read_f64_vec(r, rows * cols)?)
        };
        let read_vec = |r: &mut R, n: usize| -> Result<Vector> {
            Ok(Vector::from_vec(binio::read_f64_vec(r, n)?))
        };
        let input_proj = read_mat(r, d, d)?;
        let input_bias = read_vec(r, d)?;
        let class_token = read_vec(r, d)?;
        let pos_embed = read_mat(r, 1 + config.seq_len, d)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                ln1_gamma: read_vec(r, d)?,
                ln1_beta: read_vec(r, d)?,
                w_q: read_mat(r, d, d)?,
                b_q: read_vec(r, d)?,
                w_k: read_mat(r, d, d)?,
                b_k: read_vec(r, d)?,
                w_v: read_mat(r, d, d)?,
                b_v: read_vec(r, d)?,
                w_o: read_mat(r, d, d)?,
                b_o: read_vec(r, d)?,
                ln2_gamma: read_vec(r, d)?,
                ln2_beta: read_vec(r, d)?,
                w1: read_mat(r, d, mh)?,
                b1: read_vec(r, mh)?,
                w2: read_mat(r, mh, d)?,
                b2: read_vec(r, d)?,
            });
        }
        let final_gamma = read_vec(r, d)?;
        let final_beta = read_vec(r, d)?;
        Ok(BackboneWeights {
            config,
            input_proj,
            input_bias,
            class_token,
            pos_embed,
            layers,
            final_gamma,
            final_beta,
            frozen,
            pretrain_class_ids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save_to_writer(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let w = Self::load_from_reader(&mut f)?;
        binio::expect_eof(&mut f)?;
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            num_layers: 2,
            embed_dim: 8,
            num_heads: 2,
            seq_len: 4,
            mlp_hidden: 16,
        }
    }

    fn random_tokens(config: &BackboneConfig, rng: &mut SplitRng) -> TokenSequence {
        let mut m = Matrix::zeros(config.seq_len, config.embed_dim);
        for v in m.as_mut_slice() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
        TokenSequence::new(m)
    }

    #[test]
    fn same_seed_identical_weights() {
        let a = BackboneWeights::init(tiny_config(), 3).unwrap();
        let b = BackboneWeights::init(tiny_config(), 3).unwrap();
        assert_eq!(a, b);
        let c = BackboneWeights::init(tiny_config(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_head_count_rejected() {
        let mut cfg = tiny_config();
        cfg.num_heads = 3;
        assert!(matches!(
            BackboneWeights::init(cfg, 0),
            Err(CppError::Config(_))
        ));
    }

    #[test]
    fn encode_deterministic() {
        let w = BackboneWeights::init(tiny_config(), 7).unwrap();
        let mut rng = SplitRng::from_seed_u64(1);
        let x = random_tokens(&w.config, &mut rng);
        let (e1, _) = w.encode(&x, None, false).unwrap();
        let (e2, _) = w.encode(&x, None, false).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn no_prompts_equals_empty_prompt_set() {
        let w = BackboneWeights::init(tiny_config(), 7).unwrap();
        let mut rng = SplitRng::from_seed_u64(2);
        let x = random_tokens(&w.config, &mut rng);
        let empty = PromptSet::empty(0, w.config.num_layers, w.config.embed_dim);
        let (e1, _) = w.encode(&x, None, false).unwrap();
        let (e2, _) = w.encode(&x, Some(&empty), false).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn layer_forward_empty_prompt_matches_none() {
        let w = BackboneWeights::init(tiny_config(), 9).unwrap();
        let mut rng = SplitRng::from_seed_u64(3);
        let x = random_tokens(&w.config, &mut rng);
        let class = Vector::from_vec((0..8).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let empty = Matrix::zeros(0, 8);
        let a = layer_forward(&w.layers[0], 2, &class, None, &x).unwrap();
        let b = layer_forward(&w.layers[0], 2, &class, Some(&empty), &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layer_forward_output_shapes_fixed() {
        let w = BackboneWeights::init(tiny_config(), 9).unwrap();
        let mut rng = SplitRng::from_seed_u64(4);
        let x = random_tokens(&w.config, &mut rng);
        let class = Vector::from_vec((0..8).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        for lp in [0usize, 1, 3] {
            let mut p = Matrix::zeros(lp, 8);
            for v in p.as_mut_slice() {
                *v = rng.uniform_range(-0.05, 0.05);
            }
            let (c, t) = layer_forward(&w.layers[0], 2, &class, Some(&p), &x).unwrap();
            assert_eq!(c.dim(), 8);
            assert_eq!(t.rows(), 4);
            assert_eq!(t.cols(), 8);
        }
    }

    #[test]
    fn prompt_layer_count_mismatch_is_config_error() {
        let w = BackboneWeights::init(tiny_config(), 5).unwrap();
        let mut rng = SplitRng::from_seed_u64(5);
        let x = random_tokens(&w.config, &mut rng);
        let bad = PromptSet::empty(0, 1, 8);
        assert!(matches!(
            w.encode(&x, Some(&bad), false),
            Err(CppError::Config(_))
        ));
    }

    #[test]
    fn prompt_changes_embedding() {
        let w = BackboneWeights::init(tiny_config(), 11).unwrap();
        let mut rng = SplitRng::from_seed_u64(6);
        let x = random_tokens(&w.config, &mut rng);
        let mut s1 = SplitRng::from_seed_u64(100);
        let p1 = PromptSet::init(0, &w.config, 1, &mut s1).unwrap();
        let mut p2 = p1.clone();
        // Perturb one entry of one layer by more than the locality threshold.
        let v = p2.tokens[1].get(0, 3);
        p2.tokens[1].set(0, 3, v + 1e-3);
        let (e1, _) = w.encode(&x, Some(&p1), false).unwrap();
        let (e2, _) = w.encode(&x, Some(&p2), false).unwrap();
        let diff: f64 = e1
            .as_slice()
            .iter()
            .zip(e2.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "prompt perturbation had no effect: {diff}");
    }

    #[test]
    fn zero_upstream_grad_gives_zero_prompt_grads() {
        let w = BackboneWeights::init(tiny_config(), 13).unwrap();
        let mut rng = SplitRng::from_seed_u64(7);
        let x = random_tokens(&w.config, &mut rng);
        let mut s = SplitRng::from_seed_u64(8);
        let p = PromptSet::init(0, &w.config, 2, &mut s).unwrap();
        let (_, trace) = w.encode(&x, Some(&p), true).unwrap();
        let g = Vector::zeros(8);
        let grads = w.backward_to_prompts(&trace.unwrap(), &g).unwrap();
        for m in grads {
            assert!(m.as_slice().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn backward_is_linear_in_upstream_grad() {
        let w = BackboneWeights::init(tiny_config(), 17).unwrap();
        let mut rng = SplitRng::from_seed_u64(9);
        let x = random_tokens(&w.config, &mut rng);
        let mut s = SplitRng::from_seed_u64(10);
        let p = PromptSet::init(0, &w.config, 1, &mut s).unwrap();
        let (_, trace) = w.encode(&x, Some(&p), true).unwrap();
        let trace = trace.unwrap();
        let g1 = Vector::from_vec((0..8).map(|i| (i as f64) * 0.1 - 0.3).collect());
        let g2 = Vector::from_vec((0..8).map(|i| ((i * i) as f64) * 0.01).collect());
        let gs = g1.add(&g2);
        let a = w.backward_to_prompts(&trace, &g1).unwrap();
        let b = w.backward_to_prompts(&trace, &g2).unwrap();
        let c = w.backward_to_prompts(&trace, &gs).unwrap();
        for l in 0..2 {
            for (i, v) in c[l].as_slice().iter().enumerate() {
                let want = a[l].as_slice()[i] + b[l].as_slice()[i];
                assert!((v - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn frozen_backbone_refuses_updates() {
        let mut w = BackboneWeights::init(tiny_config(), 19).unwrap();
        assert!(!w.is_frozen());
        assert!(w.tensors_mut().is_ok());
        w.freeze();
        assert!(w.is_frozen());
        assert!(matches!(w.tensors_mut(), Err(CppError::Frozen(_))));
    }

    #[test]
    fn checksum_stable_and_weight_sensitive() {
        let w = BackboneWeights::init(tiny_config(), 23).unwrap();
        let c1 = w.checksum();
        let c2 = w.checksum();
        assert_eq!(c1, c2);
        let mut w2 = w.clone();
        let v = w2.input_proj.get(0, 0);
        w2.input_proj.set(0, 0, v + 1e-12);
        assert_ne!(w.checksum(), w2.checksum());
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let mut w = BackboneWeights::init(tiny_config(), 29).unwrap();
        w.freeze();
        let mut buf = Vec::new();
        w.save_to_writer(&mut buf).unwrap();
        let loaded = BackboneWeights::load_from_reader(&mut std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(w, loaded);
        assert!(loaded.is_frozen());
        let mut buf2 = Vec::new();
        loaded.save_to_writer(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn trace_from_other_config_rejected() {
        let w = BackboneWeights::init(tiny_config(), 31).unwrap();
        let mut cfg2 = tiny_config();
        cfg2.num_layers = 1;
        let w2 = BackboneWeights::init(cfg2, 31).unwrap();
        let mut rng = SplitRng::from_seed_u64(11);
        let x = random_tokens(&w.config, &mut rng);
        let (_, trace) = w.encode(&x, None, true).unwrap();
        let g = Vector::zeros(8);
        assert!(matches!(
            w2.backward_to_prompts(&trace.unwrap(), &g),
            Err(CppError::Trace(_))
        ));
    }

    #[test]
    fn prompt_init_within_range_and_seeded() {
        let cfg = tiny_config();
        let mut r1 = SplitRng::from_seed_u64(50);
        let mut r2 = SplitRng::from_seed_u64(50);
        let a = PromptSet::init(4, &cfg, 2, &mut r1).unwrap();
        let b = PromptSet::init(4, &cfg, 2, &mut r2).unwrap();
        assert_eq!(a, b);
        for m in &a.tokens {
            for v in m.as_slice() {
                assert!(v.abs() <= PROMPT_INIT_RANGE);
            }
        }
        assert_eq!(a.param_count(), 2 * 2 * 8);
        assert!(PromptSet::init(0, &cfg, 0, &mut r1).is_err());
    }
}
