//! Decoder-only transformer language model over the 14-symbol vocabulary.
//!
//! Blocks are pre-norm: `x + MHA(LN(x))` then `x + FFN(LN(x))`, with a final
//! layer norm and a linear head. Positions use a fixed sinusoidal encoding.
//! Attention projections carry no bias terms.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lstm::softmax_cross_entropy;
use crate::nn::{self, cosine_lr, Activation, Adam, Checkpoint, CheckpointError, NnError, Params, Tensor};
use crate::seed::{self, Rng};
use crate::text::{self, CharVocab, TextError};

/// Added to the variance inside layer norm.
pub const LN_EPS: f64 = 1e-10;

#[derive(Error, Debug)]
pub enum GptError {
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid transformer configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, GptError>;

/// `softmax(Q K^T / sqrt(d_k) + mask) V` and the attention weights.
/// Under the causal mask, positions `j > i` never enter row `i`'s sums.
pub fn attention_with_weights(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    causal: bool,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (t, dk) = q.dim();
    if dk == 0 || k.dim() != (t, dk) || v.nrows() != t {
        return Err(GptError::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let dv = v.ncols();
    let mut p = Array2::zeros((t, t));
    let mut out = Array2::zeros((t, dv));
    for i in 0..t {
        let end = if causal { i + 1 } else { t };
        let qi = q.row(i);
        let mut row: Vec<f64> = (0..end).map(|j| qi.dot(&k.row(j)) * scale).collect();
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for x in &mut row {
            *x = (*x - max).exp();
            sum += *x;
        }
        let mut o = out.row_mut(i);
        for (j, x) in row.iter().enumerate() {
            let w = x / sum;
            p[[i, j]] = w;
            o.scaled_add(w, &v.row(j));
        }
    }
    Ok((out, p))
}

pub fn scaled_dot_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    causal: bool,
) -> Result<Array2<f64>> {
    Ok(attention_with_weights(q, k, v, causal)?.0)
}

/// Per-head `d_model -> d_k` projections and the shared output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProjections {
    pub w_q: Vec<Array2<f64>>,
    pub w_k: Vec<Array2<f64>>,
    pub w_v: Vec<Array2<f64>>,
    /// `[heads * d_k x d_model]`
    pub w_o: Array2<f64>,
}

impl AttentionProjections {
    pub fn new(d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let d_k = head_dim(d_model, heads)?;
        let bound = nn::init_bound(Activation::Identity, d_model, d_k);
        let mut mats = |n: usize| -> Vec<Array2<f64>> {
            (0..n).map(|_| nn::uniform_matrix(d_model, d_k, bound, rng)).collect()
        };
        let (w_q, w_k, w_v) = (mats(heads), mats(heads), mats(heads));
        let w_o = nn::uniform_matrix(d_model, d_model, nn::init_bound(Activation::Identity, d_model, d_model), rng);
        Ok(Self { w_q, w_k, w_v, w_o })
    }

    pub fn zeros(d_model: usize, heads: usize) -> Self {
        let d_k = d_model / heads;
        let z = || vec![Array2::zeros((d_model, d_k)); heads];
        Self {
            w_q: z(),
            w_k: z(),
            w_v: z(),
            w_o: Array2::zeros((heads * d_k, d_model)),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_model(&self) -> usize {
        self.w_o.ncols()
    }

    pub fn d_k(&self) -> usize {
        self.w_q[0].ncols()
    }

    fn validate(&self, x_cols: usize) -> Result<()> {
        let (d, h) = (self.d_model(), self.heads());
        let d_k = head_dim(d, h)?;
        let ok = x_cols == d
            && self.w_k.len() == h
            && self.w_v.len() == h
            && self.w_o.nrows() == h * d_k
            && [&self.w_q, &self.w_k, &self.w_v]
                .iter()
                .all(|ws| ws.iter().all(|w| w.dim() == (d, d_k)));
        if ok {
            Ok(())
        } else {
            Err(GptError::Shape(format!("projections inconsistent with d_model {d}, {h} heads")))
        }
    }
}

fn head_dim(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model == 0 || d_model % heads != 0 {
        return Err(GptError::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
    }
    Ok(d_model / heads)
}

struct HeadTrace {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Array2<f64>,
}

struct MhaTrace {
    heads: Vec<HeadTrace>,
    concat: Array2<f64>,
}

fn multi_head_traced(x: ArrayView2<f64>, proj: &AttentionProjections, causal: bool) -> Result<(Array2<f64>, MhaTrace)> {
    proj.validate(x.ncols())?;
    let d_k = proj.d_k();
    let mut concat = Array2::zeros((x.nrows(), proj.heads() * d_k));
    let mut heads = Vec::with_capacity(proj.heads());
    for h in 0..proj.heads() {
        let q = x.dot(&proj.w_q[h]);
        let k = x.dot(&proj.w_k[h]);
        let v = x.dot(&proj.w_v[h]);
        let (o, p) = attention_with_weights(q.view(), k.view(), v.view(), causal)?;
        concat.slice_mut(s![.., h * d_k..(h + 1) * d_k]).assign(&o);
        heads.push(HeadTrace { q, k, v, p });
    }
    Ok((concat.dot(&proj.w_o), MhaTrace { heads, concat }))
}

/// Self-attention with `Q = K = V = x`, heads concatenated then projected by `W^O`.
pub fn multi_head(x: ArrayView2<f64>, proj: &AttentionProjections, causal: bool) -> Result<Array2<f64>> {
    Ok(multi_head_traced(x, proj, causal)?.0)
}

fn multi_head_backward(
    x: ArrayView2<f64>,
    proj: &AttentionProjections,
    tr: &MhaTrace,
    d_out: &Array2<f64>,
    grad: &mut AttentionProjections,
) -> Array2<f64> {
    let d_k = proj.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    grad.w_o += &tr.concat.t().dot(d_out);
    let d_concat = d_out.dot(&proj.w_o.t());
    let mut dx = Array2::zeros(x.dim());
    for (h, ht) in tr.heads.iter().enumerate() {
        let d_o = d_concat.slice(s![.., h * d_k..(h + 1) * d_k]);
        let dp = d_o.dot(&ht.v.t());
        let dv = ht.p.t().dot(&d_o);
        let mut ds = &ht.p * &dp;
        for (mut row, p_row) in ds.rows_mut().into_iter().zip(ht.p.rows()) {
            let dot = row.sum();
            row.zip_mut_with(&p_row, |d, &p| *d -= p * dot);
        }
        ds *= scale;
        let dq = ds.dot(&ht.k);
        let dk = ds.t().dot(&ht.q);
        grad.w_q[h] += &x.t().dot(&dq);
        grad.w_k[h] += &x.t().dot(&dk);
        grad.w_v[h] += &x.t().dot(&dv);
        dx += &dq.dot(&proj.w_q[h].t());
        dx += &dk.dot(&proj.w_k[h].t());
        dx += &dv.dot(&proj.w_v[h].t());
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

struct LnTrace {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Per-row standardization without the affine step.
pub fn normalize_rows(x: ArrayView2<f64>) -> Array2<f64> {
    normalize_traced(x).xhat
}

fn normalize_traced(x: ArrayView2<f64>) -> LnTrace {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    LnTrace { xhat, inv_std }
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gamma: Array1::zeros(d),
            beta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_traced(x).0
    }

    fn forward_traced(&self, x: ArrayView2<f64>) -> (Array2<f64>, LnTrace) {
        let tr = normalize_traced(x);
        let y = &tr.xhat * &self.gamma + &self.beta;
        (y, tr)
    }

    fn backward(&self, tr: &LnTrace, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &tr.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &s) in dx.rows_mut().into_iter().zip(tr.xhat.rows()).zip(&tr.inv_std) {
            let mean = row.sum() / d;
            let mean_x = row.dot(&xh) / d;
            row.zip_mut_with(&xh, |g, &xv| *g = s * (*g - mean - xv * mean_x));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    /// `[d_model x 4 d_model]`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `[4 d_model x d_model]`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: AttentionProjections,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

struct BlockTrace {
    ln1: LnTrace,
    a: Array2<f64>,
    mha: MhaTrace,
    ln2: LnTrace,
    b: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Block {
    fn new(d: usize, heads: usize, n_layers: usize, rng: &mut Rng) -> Result<Self> {
        let mut attn = AttentionProjections::new(d, heads, rng)?;
        // residual branches shrink with depth
        let depth_scale = 1.0 / ((2 * n_layers) as f64).sqrt();
        attn.w_o *= depth_scale;
        let w1 = nn::uniform_matrix(d, 4 * d, nn::init_bound(Activation::Identity, d, 4 * d), rng);
        let w2 = nn::uniform_matrix(4 * d, d, nn::init_bound(Activation::Identity, 4 * d, d), rng) * depth_scale;
        Ok(Self {
            ln1: LayerNorm::new(d),
            attn,
            ln2: LayerNorm::new(d),
            ffn: FeedForward {
                w1,
                b1: Array1::zeros(4 * d),
                w2,
                b2: Array1::zeros(d),
            },
        })
    }

    fn zeros(d: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::zeros(d),
            attn: AttentionProjections::zeros(d, heads),
            ln2: LayerNorm::zeros(d),
            ffn: FeedForward {
                w1: Array2::zeros((d, 4 * d)),
                b1: Array1::zeros(4 * d),
                w2: Array2::zeros((4 * d, d)),
                b2: Array1::zeros(d),
            },
        }
    }

    fn forward_traced(&self, x: &Array2<f64>) -> Result<(Array2<f64>, BlockTrace)> {
        let (a, ln1) = self.ln1.forward_traced(x.view());
        let (att, mha) = multi_head_traced(a.view(), &self.attn, true)?;
        let mid = x + &att;
        let (b, ln2) = self.ln2.forward_traced(mid.view());
        let pre = b.dot(&self.ffn.w1) + &self.ffn.b1;
        let act = pre.mapv(gelu);
        let out = &mid + &(act.dot(&self.ffn.w2) + &self.ffn.b2);
        Ok((
            out,
            BlockTrace {
                ln1,
                a,
                mha,
                ln2,
                b,
                pre,
                act,
            },
        ))
    }

    fn backward(&self, tr: &BlockTrace, d_out: Array2<f64>, grad: &mut Block) -> Array2<f64> {
        grad.ffn.w2 += &tr.act.t().dot(&d_out);
        grad.ffn.b2 += &d_out.sum_axis(Axis(0));
        let mut d_pre = d_out.dot(&self.ffn.w2.t());
        d_pre.zip_mut_with(&tr.pre, |g, &z| *g *= gelu_grad(z));
        grad.ffn.w1 += &tr.b.t().dot(&d_pre);
        grad.ffn.b1 += &d_pre.sum_axis(Axis(0));
        let d_b = d_pre.dot(&self.ffn.w1.t());
        let d_mid = d_out + self.ln2.backward(&tr.ln2, &d_b, &mut grad.ln2);
        let d_a = multi_head_backward(tr.a.view(), &self.attn, &tr.mha, &d_mid, &mut grad.attn);
        d_mid + self.ln1.backward(&tr.ln1, &d_a, &mut grad.ln1)
    }
}

/// Fixed sinusoidal encoding, `[positions x d_model]`.
pub fn positional_encoding(positions: usize, d_model: usize) -> Array2<f64> {
    Array2::from_shape_fn((positions, d_model), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm {
    /// `[vocab x d_model]`
    pub tok_emb: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// `[d_model x vocab]`
    pub head: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub context: usize,
    pos: Array2<f64>,
}

impl Params for TransformerLm {
    fn params(&self) -> Vec<&[f64]> {
        let mut out = vec![nn::slice2(&self.tok_emb)];
        for b in &self.blocks {
            out.push(nn::slice1(&b.ln1.gamma));
            out.push(nn::slice1(&b.ln1.beta));
            for ws in [&b.attn.w_q, &b.attn.w_k, &b.attn.w_v] {
                out.extend(ws.iter().map(nn::slice2));
            }
            out.push(nn::slice2(&b.attn.w_o));
            out.push(nn::slice1(&b.ln2.gamma));
            out.push(nn::slice1(&b.ln2.beta));
            out.push(nn::slice2(&b.ffn.w1));
            out.push(nn::slice1(&b.ffn.b1));
            out.push(nn::slice2(&b.ffn.w2));
            out.push(nn::slice1(&b.ffn.b2));
        }
        out.push(nn::slice1(&self.ln_f.gamma));
        out.push(nn::slice1(&self.ln_f.beta));
        out.push(nn::slice2(&self.head));
        out.push(nn::slice1(&self.head_bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![nn::slice2_mut(&mut self.tok_emb)];
        for b in &mut self.blocks {
            out.push(nn::slice1_mut(&mut b.ln1.gamma));
            out.push(nn::slice1_mut(&mut b.ln1.beta));
            for ws in [&mut b.attn.w_q, &mut b.attn.w_k, &mut b.attn.w_v] {
                out.extend(ws.iter_mut().map(nn::slice2_mut));
            }
            out.push(nn::slice2_mut(&mut b.attn.w_o));
            out.push(nn::slice1_mut(&mut b.ln2.gamma));
            out.push(nn::slice1_mut(&mut b.ln2.beta));
            out.push(nn::slice2_mut(&mut b.ffn.w1));
            out.push(nn::slice1_mut(&mut b.ffn.b1));
            out.push(nn::slice2_mut(&mut b.ffn.w2));
            out.push(nn::slice1_mut(&mut b.ffn.b2));
        }
        out.push(nn::slice1_mut(&mut self.ln_f.gamma));
        out.push(nn::slice1_mut(&mut self.ln_f.beta));
        out.push(nn::slice2_mut(&mut self.head));
        out.push(nn::slice1_mut(&mut self.head_bias));
        out
    }
}

impl TransformerLm {
    pub fn new(d_model: usize, heads: usize, layers: usize, context: usize, rng: &mut Rng) -> Result<Self> {
        head_dim(d_model, heads)?;
        if layers == 0 || context == 0 {
            return Err(GptError::Config("layers and context must be positive".into()));
        }
        let vocab = CharVocab.len();
        let tok_emb = nn::uniform_matrix(vocab, d_model, 1.0, rng);
        let blocks = (0..layers)
            .map(|_| Block::new(d_model, heads, layers, rng))
            .collect::<Result<_>>()?;
        let head = nn::uniform_matrix(d_model, vocab, nn::init_bound(Activation::Identity, d_model, vocab), rng);
        Ok(Self {
            tok_emb,
            blocks,
            ln_f: LayerNorm::new(d_model),
            head,
            head_bias: Array1::zeros(vocab),
            context,
            pos: positional_encoding(context, d_model),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let (d, h) = (self.d_model(), self.heads());
        Self {
            tok_emb: Array2::zeros(self.tok_emb.dim()),
            blocks: (0..self.blocks.len()).map(|_| Block::zeros(d, h)).collect(),
            ln_f: LayerNorm::zeros(d),
            head: Array2::zeros(self.head.dim()),
            head_bias: Array1::zeros(self.head_bias.len()),
            context: self.context,
            pos: self.pos.clone(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.tok_emb.ncols()
    }

    pub fn heads(&self) -> usize {
        self.blocks[0].attn.heads()
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    fn embed(&self, tokens: &[usize], start: usize) -> Array2<f64> {
        let mut x = Array2::zeros((tokens.len(), self.d_model()));
        for (r, &tok) in tokens.iter().enumerate() {
            let mut row = x.row_mut(r);
            row.assign(&self.tok_emb.row(tok));
            row += &self.pos.row(start + r);
        }
        x
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.context {
            return Err(GptError::Shape(format!(
                "sequence of {} tokens, context holds {}",
                tokens.len(),
                self.context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.tok_emb.nrows()) {
            return Err(TextError::BadIndex(bad).into());
        }
        Ok(())
    }

    /// Next-symbol logits at every position, `[seq x vocab]`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens, 0);
        for b in &self.blocks {
            x = b.forward_traced(&x)?.0;
        }
        Ok(self.ln_f.forward(x.view()).dot(&self.head) + &self.head_bias)
    }

    /// Mean next-symbol cross-entropy over one sequence, and its gradient.
    pub fn loss_and_grad(&self, tokens: &[usize], targets: &[usize]) -> Result<(f64, TransformerLm)> {
        self.check_tokens(tokens)?;
        if targets.len() != tokens.len() {
            return Err(GptError::Shape("targets must align with tokens".into()));
        }
        let mut x = self.embed(tokens, 0);
        let mut traces = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, tr) = b.forward_traced(&x)?;
            traces.push(tr);
            x = y;
        }
        let (y, ln_tr) = self.ln_f.forward_traced(x.view());
        let logits = y.dot(&self.head) + &self.head_bias;
        let (loss, d_logits) = softmax_cross_entropy(&logits, targets);

        let mut g = self.zeros_like();
        g.head = y.t().dot(&d_logits);
        g.head_bias = d_logits.sum_axis(Axis(0));
        let dy = d_logits.dot(&self.head.t());
        let mut dx = self.ln_f.backward(&ln_tr, &dy, &mut g.ln_f);
        for ((b, tr), gb) in self.blocks.iter().zip(&traces).zip(&mut g.blocks).rev() {
            dx = b.backward(tr, dx, gb);
        }
        for (r, &tok) in tokens.iter().enumerate() {
            let mut row = g.tok_emb.row_mut(tok);
            row += &dx.row(r);
        }
        Ok((loss, g))
    }

    /// Incremental single-stream decoder over this model.
    pub fn sampler(&self) -> GptSampler<'_> {
        let layers = self
            .blocks
            .iter()
            .map(|b| {
                let qkv: Vec<_> = [&b.attn.w_q, &b.attn.w_k, &b.attn.w_v]
                    .iter()
                    .flat_map(|ws| ws.iter().map(|w| w.t()))
                    .collect();
                StepWeights {
                    qkv_t: ndarray::concatenate(Axis(0), &qkv).expect("head shapes agree"),
                    w_o_t: b.attn.w_o.t().as_standard_layout().into_owned(),
                    w1_t: b.ffn.w1.t().as_standard_layout().into_owned(),
                    w2_t: b.ffn.w2.t().as_standard_layout().into_owned(),
                }
            })
            .collect();
        let d_k = self.blocks[0].attn.d_k();
        let empty = || vec![vec![Array2::zeros((0, d_k)); self.heads()]; self.blocks.len()];
        GptSampler {
            model: self,
            layers,
            head_t: self.head.t().as_standard_layout().into_owned(),
            keys: empty(),
            values: empty(),
            len: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push(Tensor::scalar("kind.gpt", 1.0));
        c.push(Tensor::scalar("meta.heads", self.heads() as f64));
        c.push(Tensor::scalar("meta.context", self.context as f64));
        let m2 = |c: &mut Checkpoint, name: String, a: &Array2<f64>| {
            c.push(Tensor::new(name, vec![a.nrows(), a.ncols()], nn::slice2(a).to_vec()))
        };
        let m1 = |c: &mut Checkpoint, name: String, a: &Array1<f64>| {
            c.push(Tensor::new(name, vec![a.len()], nn::slice1(a).to_vec()))
        };
        m2(&mut c, "tok_emb".into(), &self.tok_emb);
        for (l, b) in self.blocks.iter().enumerate() {
            m1(&mut c, format!("block{l}.ln1.gamma"), &b.ln1.gamma);
            m1(&mut c, format!("block{l}.ln1.beta"), &b.ln1.beta);
            for h in 0..b.attn.heads() {
                m2(&mut c, format!("block{l}.attn.w_q{h}"), &b.attn.w_q[h]);
                m2(&mut c, format!("block{l}.attn.w_k{h}"), &b.attn.w_k[h]);
                m2(&mut c, format!("block{l}.attn.w_v{h}"), &b.attn.w_v[h]);
            }
            m2(&mut c, format!("block{l}.attn.w_o"), &b.attn.w_o);
            m1(&mut c, format!("block{l}.ln2.gamma"), &b.ln2.gamma);
            m1(&mut c, format!("block{l}.ln2.beta"), &b.ln2.beta);
            m2(&mut c, format!("block{l}.ffn.w1"), &b.ffn.w1);
            m1(&mut c, format!("block{l}.ffn.b1"), &b.ffn.b1);
            m2(&mut c, format!("block{l}.ffn.w2"), &b.ffn.w2);
            m1(&mut c, format!("block{l}.ffn.b2"), &b.ffn.b2);
        }
        m1(&mut c, "ln_f.gamma".into(), &self.ln_f.gamma);
        m1(&mut c, "ln_f.beta".into(), &self.ln_f.beta);
        m2(&mut c, "head.weight".into(), &self.head);
        m1(&mut c, "head.bias".into(), &self.head_bias);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("gpt")?;
        let heads = c.count("meta.heads")?;
        let context = c.count("meta.context")?;
        let emb = c.get("tok_emb")?;
        if emb.shape.len() != 2 || emb.shape[0] != CharVocab.len() {
            return Err(GptError::Shape(format!("tok_emb shape {:?}", emb.shape)));
        }
        let d = emb.shape[1];
        let d_k = head_dim(d, heads)?;
        if context == 0 {
            return Err(GptError::Config("context must be positive".into()));
        }
        let vocab = CharVocab.len();
        let m2 = |name: &str, r: usize, k: usize| -> Result<Array2<f64>> {
            Ok(Array2::from_shape_vec((r, k), c.data(name, &[r, k])?.to_vec()).expect("shape checked"))
        };
        let m1 = |name: &str, n: usize| -> Result<Array1<f64>> { Ok(Array1::from(c.data(name, &[n])?.to_vec())) };
        let mut blocks = Vec::new();
        while c.contains(&format!("block{}.ln1.gamma", blocks.len())) {
            let l = blocks.len();
            let p = |n: &str| format!("block{l}.{n}");
            let per_head = |n: &str| -> Result<Vec<Array2<f64>>> {
                (0..heads).map(|h| m2(&p(&format!("attn.{n}{h}")), d, d_k)).collect()
            };
            blocks.push(Block {
                ln1: LayerNorm {
                    gamma: m1(&p("ln1.gamma"), d)?,
                    beta: m1(&p("ln1.beta"), d)?,
                },
                attn: AttentionProjections {
                    w_q: per_head("w_q")?,
                    w_k: per_head("w_k")?,
                    w_v: per_head("w_v")?,
                    w_o: m2(&p("attn.w_o"), d, d)?,
                },
                ln2: LayerNorm {
                    gamma: m1(&p("ln2.gamma"), d)?,
                    beta: m1(&p("ln2.beta"), d)?,
                },
                ffn: FeedForward {
                    w1: m2(&p("ffn.w1"), d, 4 * d)?,
                    b1: m1(&p("ffn.b1"), 4 * d)?,
                    w2: m2(&p("ffn.w2"), 4 * d, d)?,
                    b2: m1(&p("ffn.b2"), d)?,
                },
            });
        }
        if blocks.is_empty() {
            return Err(CheckpointError::Missing("block0.ln1.gamma".into()).into());
        }
        Ok(Self {
            tok_emb: m2("tok_emb", vocab, d)?,
            blocks,
            ln_f: LayerNorm {
                gamma: m1("ln_f.gamma", d)?,
                beta: m1("ln_f.beta", d)?,
            },
            head: m2("head.weight", d, vocab)?,
            head_bias: m1("head.bias", vocab)?,
            context,
            pos: positional_encoding(context, d),
        })
    }
}

struct StepWeights {
    /// `[3 * heads * d_k x d_model]`, all query heads, then keys, then values.
    qkv_t: Array2<f64>,
    w_o_t: Array2<f64>,
    w1_t: Array2<f64>,
    w2_t: Array2<f64>,
}

/// Holds per-layer key/value rows so each new position costs one token's work.
pub struct GptSampler<'a> {
    model: &'a TransformerLm,
    layers: Vec<StepWeights>,
    head_t: Array2<f64>,
    keys: Vec<Vec<Array2<f64>>>,
    values: Vec<Vec<Array2<f64>>>,
    len: usize,
}

impl GptSampler<'_> {
    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn reset(&mut self) {
        for kv in self.keys.iter_mut().chain(self.values.iter_mut()) {
            for m in kv.iter_mut() {
                *m = Array2::zeros((0, m.ncols()));
            }
        }
        self.len = 0;
    }

    /// Logits for the next symbol after appending `token` at position `len()`.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let model = self.model;
        if self.len >= model.context {
            return Err(GptError::Shape(format!("context full at {} positions", self.len)));
        }
        model.check_tokens(&[token])?;
        let mut x = &model.tok_emb.row(token) + &model.pos.row(self.len);
        for (l, (b, w)) in model.blocks.iter().zip(&self.layers).enumerate() {
            let a = layer_norm_vec(x.view(), &b.ln1);
            let qkv = w.qkv_t.dot(&a);
            let (heads, d_k) = (b.attn.heads(), b.attn.d_k());
            let mut concat = Array1::zeros(heads * d_k);
            for h in 0..heads {
                let part = |k: usize| qkv.slice(s![(k * heads + h) * d_k..(k * heads + h + 1) * d_k]);
                self.keys[l][h].push_row(part(1)).expect("width d_k");
                self.values[l][h].push_row(part(2)).expect("width d_k");
                let o = attend_last(part(0), self.keys[l][h].view(), self.values[l][h].view());
                concat.slice_mut(s![h * d_k..(h + 1) * d_k]).assign(&o);
            }
            let mid = &x + &w.w_o_t.dot(&concat);
            let bb = layer_norm_vec(mid.view(), &b.ln2);
            let act = (w.w1_t.dot(&bb) + &b.ffn.b1).mapv(gelu);
            x = &mid + &(w.w2_t.dot(&act) + &b.ffn.b2);
        }
        self.len += 1;
        let y = layer_norm_vec(x.view(), &model.ln_f);
        Ok((self.head_t.dot(&y) + &model.head_bias).to_vec())
    }
}

fn layer_norm_vec(x: ArrayView1<f64>, ln: &LayerNorm) -> Array1<f64> {
    &normalize_traced(x.insert_axis(Axis(0))).xhat.row(0) * &ln.gamma + &ln.beta
}

/// Attention of one query over all cached rows, summed in the same order as the full pass.
fn attend_last(q: ArrayView1<f64>, keys: ArrayView2<f64>, values: ArrayView2<f64>) -> Array1<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let mut scores: Vec<f64> = keys.rows().into_iter().map(|k| q.dot(&k) * scale).collect();
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for x in &mut scores {
        *x = (*x - max).exp();
        sum += *x;
    }
    let mut o = Array1::zeros(values.ncols());
    for (e, v) in scores.iter().zip(values.rows()) {
        o.scaled_add(e / sum, &v);
    }
    o
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GptConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Maximum sequence length seen by attention.
    pub context: usize,
    pub epochs: usize,
    /// Learning rate at the first epoch.
    pub lr: f64,
    /// Learning rate at the last epoch; cosine-annealed in between.
    pub min_lr: f64,
    /// Sequences per update.
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            layers: 4,
            context: 256,
            epochs: 20,
            lr: 1e-3,
            min_lr: 1e-4,
            batch_size: 16,
            clip_norm: 1.0,
        }
    }
}

impl GptConfig {
    pub fn validate(&self) -> Result<()> {
        head_dim(self.d_model, self.heads)?;
        if self.layers == 0 || self.context < 2 || self.epochs == 0 || self.batch_size == 0 {
            return Err(GptError::Config(
                "layers, epochs and batch_size must be positive and context at least 2".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_norm > 0.0) {
            return Err(GptError::Config("lr and clip_norm must be positive".into()));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return Err(GptError::Config(format!("min_lr must lie in (0, lr], got {}", self.min_lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedGpt {
    pub model: TransformerLm,
    /// Mean training cross-entropy per epoch, nats per character.
    pub history: Vec<f64>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Teacher-forced training on context-length windows. Each epoch tiles the
/// corpus from a random offset and visits the windows in shuffled order.
pub fn train_transformer(corpus: &str, config: &GptConfig, seed: u64) -> Result<TrainedGpt> {
    config.validate()?;
    let ids = CharVocab.encode(corpus)?;
    if ids.len() <= config.context {
        return Err(TextError::TooShort {
            len: ids.len(),
            needed: config.context,
        }
        .into());
    }
    let mut rng = seed::rng(seed);
    let mut model = TransformerLm::new(config.d_model, config.heads, config.layers, config.context, &mut rng)?;
    let mut adam = Adam::new(config.lr);
    let ctx = config.context;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0, model.clone());

    for epoch in 1..=config.epochs {
        adam.lr = cosine_lr(config.lr, config.min_lr, epoch, config.epochs);
        let shift = rng.random_range(0..ctx.min(ids.len() - ctx));
        let mut starts: Vec<usize> = (shift..ids.len() - ctx).step_by(ctx).collect();
        starts.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in starts.chunks(config.batch_size) {
            let parts: Vec<(f64, TransformerLm)> = chunk
                .par_iter()
                .map(|&s0| model.loss_and_grad(&ids[s0..s0 + ctx], &ids[s0 + 1..s0 + ctx + 1]))
                .collect::<Result<_>>()?;
            let mut grads = model.zeros_like();
            for (loss, g) in &parts {
                total += loss * ctx as f64;
                grads.add_assign(g);
            }
            count += ctx * parts.len();
            grads.scale(1.0 / parts.len() as f64);
            grads.clip_norm(config.clip_norm);
            adam.step(&mut model, &grads)?;
        }
        let epoch_loss = total / count as f64;
        log::debug!("gpt epoch {epoch}: loss {epoch_loss:.4}");
        history.push(epoch_loss);
        if epoch_loss < best.0 {
            best = (epoch_loss, epoch, model.clone());
        }
    }
    let (best_loss, best_epoch, model) = best;
    Ok(TrainedGpt {
        model,
        history,
        best_epoch,
        best_loss,
    })
}

/// Exactly `n` characters following a discarded warm-up line (see
/// [`text::WARMUP_LIMIT`]). Temperature 0 is greedy.
/// When the context fills, generation continues from its most recent half.
pub fn sample_chars(model: &TransformerLm, n: usize, temperature: f64, seed: u64) -> Result<String> {
    text::check_temperature(temperature)?;
    let mut rng = seed::rng(seed);
    let newline = CharVocab.newline();
    let mut history = vec![newline];
    let mut sampler = model.sampler();
    let mut logits = sampler.step(newline)?;
    let mut warmup = 0;
    let mut out = String::with_capacity(n);
    while out.len() < n {
        let token = text::sample_index(&logits, temperature, &mut rng)?;
        history.push(token);
        if warmup == usize::MAX {
            out.push(CharVocab.symbol(token)?);
            if out.len() == n {
                break;
            }
        } else {
            warmup += 1;
            if token == newline || warmup == text::WARMUP_LIMIT {
                warmup = usize::MAX;
            }
        }
        if sampler.len() == model.context {
            let keep = (model.context / 2).max(1);
            sampler.reset();
            for &t in &history[history.len() - keep..history.len() - 1] {
                sampler.step(t)?;
            }
        }
        logits = sampler.step(token)?;
    }
    Ok(out)
}

/// Cross-entropy of `model` on `corpus`, scored in non-overlapping context windows.
pub fn evaluate_loss(model: &TransformerLm, corpus: &str) -> Result<f64> {
    let ids = CharVocab.encode(corpus)?;
    if ids.len() < 2 {
        return Err(TextError::TooShort { len: ids.len(), needed: 1 }.into());
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut s0 = 0;
    while s0 + 1 < ids.len() {
        let end = (s0 + model.context).min(ids.len() - 1);
        let logits = model.forward(&ids[s0..end])?;
        total += softmax_cross_entropy(&logits, &ids[s0 + 1..end + 1]).0 * (end - s0) as f64;
        count += end - s0;
        s0 = end;
    }
    Ok(total / count as f64)
}
