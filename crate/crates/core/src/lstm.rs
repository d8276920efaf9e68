//! Character-level LSTM language model.
//!
//! Each cell follows the classic gate equations over the concatenation
//! `[h_{t-1}, x_t]`:
//!
//! ```text
//! f_t = sigma(W_f [h, x] + b_f)      i_t = sigma(W_i [h, x] + b_i)
//! C~_t = tanh(W_c [h, x] + b_c)      o_t = sigma(W_o [h, x] + b_o)
//! C_t = f_t * C_{t-1} + i_t * C~_t    h_t = o_t * tanh(C_t)
//! ```
//!
//! Inputs are one-hot over [`CharVocab`]; a dense head maps the top layer's
//! output to vocabulary logits. Dropout sits on every layer's output.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, cosine_lr, sigmoid, Activation, Adam, Checkpoint, CheckpointError, DenseLayer, NnError, Params, Tensor};
use crate::seed::{self, Rng};
pub use crate::text::CharVocab;
use crate::text::{self, TextError};

pub const ALLOWED_UNITS: [usize; 4] = [64, 128, 256, 512];
pub const MAX_LAYERS: usize = 3;

#[derive(Error, Debug)]
pub enum LstmError {
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid LSTM configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, LstmError>;

/// One recurrent layer. Every weight matrix is `[hidden x (hidden + input)]`
/// with the previous hidden state occupying the leading columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_f: Array2<f64>,
    pub w_i: Array2<f64>,
    pub w_c: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_f: Array1<f64>,
    pub b_i: Array1<f64>,
    pub b_c: Array1<f64>,
    pub b_o: Array1<f64>,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = nn::init_bound(Activation::Tanh, hidden + input, hidden);
        let mut w = || nn::uniform_matrix(hidden, hidden + input, bound, rng);
        let (w_f, w_i, w_c, w_o) = (w(), w(), w(), w());
        Self {
            w_f,
            w_i,
            w_c,
            w_o,
            // forget gate starts open
            b_f: Array1::ones(hidden),
            b_i: Array1::zeros(hidden),
            b_c: Array1::zeros(hidden),
            b_o: Array1::zeros(hidden),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Array2::zeros((hidden, hidden + input));
        Self {
            w_f: w(),
            w_i: w(),
            w_c: w(),
            w_o: w(),
            b_f: Array1::zeros(hidden),
            b_i: Array1::zeros(hidden),
            b_c: Array1::zeros(hidden),
            b_o: Array1::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_f.nrows()
    }

    pub fn input(&self) -> usize {
        self.w_f.ncols() - self.hidden()
    }

    fn tensors(&self) -> [&Array2<f64>; 4] {
        [&self.w_f, &self.w_i, &self.w_c, &self.w_o]
    }

    fn biases(&self) -> [&Array1<f64>; 4] {
        [&self.b_f, &self.b_i, &self.b_c, &self.b_o]
    }

    /// `[4H x (H + I)]`, gate blocks in f, i, c, o order.
    fn fused_weights(&self) -> Array2<f64> {
        let [f, i, c, o] = self.tensors();
        concatenate(Axis(0), &[f.view(), i.view(), c.view(), o.view()]).expect("gate shapes agree")
    }

    fn fused_bias(&self) -> Array1<f64> {
        let [f, i, c, o] = self.biases();
        concatenate(Axis(0), &[f.view(), i.view(), c.view(), o.view()]).expect("gate shapes agree")
    }

    fn add_fused_grads(&mut self, dw: &Array2<f64>, db: &Array1<f64>) {
        let h = self.hidden();
        for (g, (w, b)) in [
            (&mut self.w_f, &mut self.b_f),
            (&mut self.w_i, &mut self.b_i),
            (&mut self.w_c, &mut self.b_c),
            (&mut self.w_o, &mut self.b_o),
        ]
        .into_iter()
        .enumerate()
        {
            *w += &dw.slice(s![g * h..(g + 1) * h, ..]);
            *b += &db.slice(s![g * h..(g + 1) * h]);
        }
    }
}

/// Gate activations of a single step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGates {
    pub forget: Array1<f64>,
    pub input: Array1<f64>,
    pub candidate: Array1<f64>,
    pub output: Array1<f64>,
}

/// One cell update for a single sequence element. Returns `(h_t, C_t)` and the gates.
pub fn lstm_step_gates(
    cell: &LstmCell,
    x: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>, StepGates)> {
    let hidden = cell.hidden();
    if x.len() != cell.input() || h_prev.len() != hidden || c_prev.len() != hidden {
        return Err(LstmError::Shape(format!(
            "cell expects input {} and hidden {}, got x {}, h {}, c {}",
            cell.input(),
            hidden,
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let z = concatenate(Axis(0), &[h_prev, x]).expect("1-d concatenation");
    let gate = |w: &Array2<f64>, b: &Array1<f64>| w.dot(&z) + b;
    let forget = gate(&cell.w_f, &cell.b_f).mapv(sigmoid);
    let input = gate(&cell.w_i, &cell.b_i).mapv(sigmoid);
    let candidate = gate(&cell.w_c, &cell.b_c).mapv(f64::tanh);
    let output = gate(&cell.w_o, &cell.b_o).mapv(sigmoid);
    let c = &forget * &c_prev + &input * &candidate;
    let h = &output * &c.mapv(f64::tanh);
    Ok((
        h,
        c,
        StepGates {
            forget,
            input,
            candidate,
            output,
        },
    ))
}

pub fn lstm_step(
    cell: &LstmCell,
    x: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
    c_prev: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (h, c, _) = lstm_step_gates(cell, x, h_prev, c_prev)?;
    Ok((h, c))
}

/// Recurrent state for a batch: per layer `[batch x hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Array2<f64>>,
    pub c: Vec<Array2<f64>>,
}

impl LstmState {
    pub fn zeros(model: &LstmStack, batch: usize) -> Self {
        let z = |cell: &LstmCell| Array2::zeros((batch, cell.hidden()));
        Self {
            h: model.cells.iter().map(z).collect(),
            c: model.cells.iter().map(z).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmStack {
    pub cells: Vec<LstmCell>,
    pub head: DenseLayer,
    pub dropout: f64,
}

impl Params for LstmStack {
    fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for cell in &self.cells {
            out.extend(cell.tensors().map(nn::slice2));
            out.extend(cell.biases().map(nn::slice1));
        }
        out.push(nn::slice2(&self.head.weights));
        out.push(nn::slice1(&self.head.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for cell in &mut self.cells {
            out.push(nn::slice2_mut(&mut cell.w_f));
            out.push(nn::slice2_mut(&mut cell.w_i));
            out.push(nn::slice2_mut(&mut cell.w_c));
            out.push(nn::slice2_mut(&mut cell.w_o));
            out.push(nn::slice1_mut(&mut cell.b_f));
            out.push(nn::slice1_mut(&mut cell.b_i));
            out.push(nn::slice1_mut(&mut cell.b_c));
            out.push(nn::slice1_mut(&mut cell.b_o));
        }
        out.push(nn::slice2_mut(&mut self.head.weights));
        out.push(nn::slice1_mut(&mut self.head.bias));
        out
    }
}

/// Per-layer activations of one window, rows laid out `t * batch + b`.
struct LayerTrace {
    z: Array2<f64>,
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    out: Array2<f64>,
    mask: Option<Array2<f64>>,
    c0: Array2<f64>,
}

pub struct WindowPass {
    traces: Vec<LayerTrace>,
    batch: usize,
    steps: usize,
    /// `[steps * batch x vocab]`
    pub logits: Array2<f64>,
    pub state: LstmState,
}

impl LstmStack {
    pub fn new(vocab: usize, hidden: usize, layers: usize, dropout: f64, rng: &mut Rng) -> Self {
        let cells = (0..layers)
            .map(|l| LstmCell::new(if l == 0 { vocab } else { hidden }, hidden, rng))
            .collect();
        Self {
            cells,
            head: DenseLayer::new(hidden, vocab, Activation::Identity, rng),
            dropout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cells: self.cells.iter().map(|c| LstmCell::zeros(c.input(), c.hidden())).collect(),
            head: DenseLayer::zeros(self.head.n_in(), self.head.n_out(), Activation::Identity),
            dropout: self.dropout,
        }
    }

    pub fn vocab(&self) -> usize {
        self.cells[0].input()
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden()
    }

    pub fn n_layers(&self) -> usize {
        self.cells.len()
    }

    /// Runs `steps` time steps for `batch` parallel streams. `inputs[t * batch + b]`
    /// is the symbol fed at step `t` to stream `b`. With `dropout_rng`, dropout is active.
    pub fn forward_window(
        &self,
        inputs: &[usize],
        batch: usize,
        state: &LstmState,
        mut dropout_rng: Option<&mut Rng>,
    ) -> WindowPass {
        let steps = inputs.len() / batch;
        let rows = steps * batch;
        let mut layer_in = Array2::zeros((rows, self.vocab()));
        for (r, &tok) in inputs.iter().enumerate() {
            layer_in[[r, tok]] = 1.0;
        }
        let mut traces = Vec::with_capacity(self.cells.len());
        let mut next_state = state.clone();
        for (l, cell) in self.cells.iter().enumerate() {
            let hdim = cell.hidden();
            let w = cell.fused_weights();
            let wt = w.t();
            let b = cell.fused_bias();
            let mut z = Array2::zeros((rows, hdim + cell.input()));
            z.slice_mut(s![.., hdim..]).assign(&layer_in);
            let mut gates = Array2::zeros((rows, 4 * hdim));
            let mut c_all = Array2::zeros((rows, hdim));
            let mut tanh_all = Array2::zeros((rows, hdim));
            let mut h_all = Array2::zeros((rows, hdim));
            let mut h = state.h[l].clone();
            let mut c = state.c[l].clone();
            for t in 0..steps {
                let r = t * batch..(t + 1) * batch;
                z.slice_mut(s![r.clone(), ..hdim]).assign(&h);
                let mut g = z.slice(s![r.clone(), ..]).dot(&wt);
                g += &b;
                g.slice_mut(s![.., ..2 * hdim]).mapv_inplace(sigmoid);
                g.slice_mut(s![.., 2 * hdim..3 * hdim]).mapv_inplace(f64::tanh);
                g.slice_mut(s![.., 3 * hdim..]).mapv_inplace(sigmoid);
                let f = g.slice(s![.., ..hdim]);
                let i = g.slice(s![.., hdim..2 * hdim]);
                let cand = g.slice(s![.., 2 * hdim..3 * hdim]);
                let o = g.slice(s![.., 3 * hdim..]);
                c = &f * &c + &i * &cand;
                let tc = c.mapv(f64::tanh);
                h = &o * &tc;
                gates.slice_mut(s![r.clone(), ..]).assign(&g);
                c_all.slice_mut(s![r.clone(), ..]).assign(&c);
                tanh_all.slice_mut(s![r.clone(), ..]).assign(&tc);
                h_all.slice_mut(s![r, ..]).assign(&h);
            }
            next_state.h[l] = h;
            next_state.c[l] = c;
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    Some(Array2::from_shape_simple_fn((rows, hdim), || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    }))
                }
                _ => None,
            };
            let out = match &mask {
                Some(m) => &h_all * m,
                None => h_all,
            };
            layer_in = out.clone();
            traces.push(LayerTrace {
                z,
                gates,
                c: c_all,
                tanh_c: tanh_all,
                out,
                mask,
                c0: state.c[l].clone(),
            });
        }
        let logits = self.head.affine(layer_in.view());
        WindowPass {
            traces,
            batch,
            steps,
            logits,
            state: next_state,
        }
    }

    /// Backpropagates `d_logits` through the window; the incoming state is a constant.
    pub fn backward_window(&self, pass: &WindowPass, d_logits: &Array2<f64>) -> LstmStack {
        let mut grads = self.zeros_like();
        let top = &pass.traces.last().expect("at least one layer").out;
        grads.head.weights = d_logits.t().dot(top);
        grads.head.bias = d_logits.sum_axis(Axis(0));
        // gradient w.r.t. each layer's (post-dropout) output sequence
        let mut d_out = d_logits.dot(&self.head.weights);
        let (batch, steps) = (pass.batch, pass.steps);
        for l in (0..self.cells.len()).rev() {
            let cell = &self.cells[l];
            let tr = &pass.traces[l];
            let hdim = cell.hidden();
            let w = cell.fused_weights();
            if let Some(m) = &tr.mask {
                d_out *= m;
            }
            let mut d_gates = Array2::zeros((steps * batch, 4 * hdim));
            let mut d_input = Array2::zeros((steps * batch, cell.input()));
            let mut dh_next: Array2<f64> = Array2::zeros((batch, hdim));
            let mut dc_next: Array2<f64> = Array2::zeros((batch, hdim));
            for t in (0..steps).rev() {
                let r = t * batch..(t + 1) * batch;
                let g = tr.gates.slice(s![r.clone(), ..]);
                let (f, i) = (g.slice(s![.., ..hdim]), g.slice(s![.., hdim..2 * hdim]));
                let (cand, o) = (g.slice(s![.., 2 * hdim..3 * hdim]), g.slice(s![.., 3 * hdim..]));
                let tc = tr.tanh_c.slice(s![r.clone(), ..]);
                let c_prev = if t == 0 {
                    tr.c0.view()
                } else {
                    tr.c.slice(s![(t - 1) * batch..t * batch, ..])
                };
                let dh = &d_out.slice(s![r.clone(), ..]) + &dh_next;
                let d_o = &dh * &tc;
                let dc = &(&dh * &o) * &tc.mapv(|v| 1.0 - v * v) + &dc_next;
                let mut dg = d_gates.slice_mut(s![r.clone(), ..]);
                ndarray::Zip::from(dg.slice_mut(s![.., ..hdim]))
                    .and(&dc)
                    .and(&c_prev)
                    .and(&f)
                    .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (1.0 - f));
                ndarray::Zip::from(dg.slice_mut(s![.., hdim..2 * hdim]))
                    .and(&dc)
                    .and(&cand)
                    .and(&i)
                    .for_each(|d, &dc, &cand, &i| *d = dc * cand * i * (1.0 - i));
                ndarray::Zip::from(dg.slice_mut(s![.., 2 * hdim..3 * hdim]))
                    .and(&dc)
                    .and(&i)
                    .and(&cand)
                    .for_each(|d, &dc, &i, &cand| *d = dc * i * (1.0 - cand * cand));
                ndarray::Zip::from(dg.slice_mut(s![.., 3 * hdim..]))
                    .and(&d_o)
                    .and(&o)
                    .for_each(|d, &d_o, &o| *d = d_o * o * (1.0 - o));
                dc_next = &dc * &f;
                let dz = dg.dot(&w);
                dh_next = dz.slice(s![.., ..hdim]).to_owned();
                d_input.slice_mut(s![r, ..]).assign(&dz.slice(s![.., hdim..]));
            }
            let dw = d_gates.t().dot(&tr.z);
            let db = d_gates.sum_axis(Axis(0));
            grads.cells[l].add_fused_grads(&dw, &db);
            d_out = d_input;
        }
        grads
    }

    /// Mean cross-entropy (nats per symbol) of a window and its gradient.
    pub fn window_loss_and_grad(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        state: &LstmState,
        dropout_rng: Option<&mut Rng>,
    ) -> (f64, LstmStack, LstmState) {
        let pass = self.forward_window(inputs, batch, state, dropout_rng);
        let (loss, d_logits) = softmax_cross_entropy(&pass.logits, targets);
        let grads = self.backward_window(&pass, &d_logits);
        (loss, grads, pass.state)
    }

    /// Single-stream stepper with fused gate weights (evaluation mode).
    pub fn sampler(&self) -> LstmSampler<'_> {
        LstmSampler {
            model: self,
            fused: self.cells.iter().map(|c| (c.fused_weights(), c.fused_bias())).collect(),
            h: self.cells.iter().map(|c| Array1::zeros(c.hidden())).collect(),
            c: self.cells.iter().map(|c| Array1::zeros(c.hidden())).collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push(Tensor::scalar("kind.lstm", 1.0));
        c.push(Tensor::scalar("meta.dropout", self.dropout));
        for (l, cell) in self.cells.iter().enumerate() {
            for (name, w) in ["w_f", "w_i", "w_c", "w_o"].iter().zip(cell.tensors()) {
                c.push(Tensor::new(
                    format!("layer{l}.{name}"),
                    vec![w.nrows(), w.ncols()],
                    nn::slice2(w).to_vec(),
                ));
            }
            for (name, b) in ["b_f", "b_i", "b_c", "b_o"].iter().zip(cell.biases()) {
                c.push(Tensor::new(format!("layer{l}.{name}"), vec![b.len()], nn::slice1(b).to_vec()));
            }
        }
        c.push(Tensor::new(
            "head.weight",
            vec![self.head.n_out(), self.head.n_in()],
            nn::slice2(&self.head.weights).to_vec(),
        ));
        c.push(Tensor::new("head.bias", vec![self.head.n_out()], nn::slice1(&self.head.bias).to_vec()));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("lstm")?;
        let dropout = c.scalar("meta.dropout")?;
        let head_w = c.get("head.weight")?;
        if head_w.shape.len() != 2 {
            return Err(LstmError::Shape("head.weight must be rank 2".into()));
        }
        let (vocab, hidden) = (head_w.shape[0], head_w.shape[1]);
        let mut cells = Vec::new();
        while c.contains(&format!("layer{}.w_f", cells.len())) {
            let l = cells.len();
            let input = if l == 0 { vocab } else { hidden };
            let mat = |name: &str| -> Result<Array2<f64>> {
                let d = c.data(&format!("layer{l}.{name}"), &[hidden, hidden + input])?;
                Ok(Array2::from_shape_vec((hidden, hidden + input), d.to_vec()).expect("shape checked"))
            };
            let vec = |name: &str| -> Result<Array1<f64>> {
                Ok(Array1::from(c.data(&format!("layer{l}.{name}"), &[hidden])?.to_vec()))
            };
            cells.push(LstmCell {
                w_f: mat("w_f")?,
                w_i: mat("w_i")?,
                w_c: mat("w_c")?,
                w_o: mat("w_o")?,
                b_f: vec("b_f")?,
                b_i: vec("b_i")?,
                b_c: vec("b_c")?,
                b_o: vec("b_o")?,
            });
        }
        if cells.is_empty() {
            return Err(CheckpointError::Missing("layer0.w_f".into()).into());
        }
        let head = DenseLayer {
            weights: Array2::from_shape_vec((vocab, hidden), head_w.data.clone()).expect("shape checked"),
            bias: Array1::from(c.data("head.bias", &[vocab])?.to_vec()),
            activation: Activation::Identity,
        };
        Ok(Self { cells, head, dropout })
    }
}

pub struct LstmSampler<'a> {
    model: &'a LstmStack,
    fused: Vec<(Array2<f64>, Array1<f64>)>,
    h: Vec<Array1<f64>>,
    c: Vec<Array1<f64>>,
}

impl LstmSampler<'_> {
    /// Feeds `token` and returns the logits of the next symbol.
    pub fn step(&mut self, token: usize) -> Vec<f64> {
        let mut x = Array1::zeros(self.model.vocab());
        x[token] = 1.0;
        for (l, (w, b)) in self.fused.iter().enumerate() {
            let hdim = self.h[l].len();
            let z = concatenate(Axis(0), &[self.h[l].view(), x.view()]).expect("1-d concatenation");
            let g = w.dot(&z) + b;
            for j in 0..hdim {
                let f = sigmoid(g[j]);
                let i = sigmoid(g[hdim + j]);
                let cand = g[2 * hdim + j].tanh();
                let o = sigmoid(g[3 * hdim + j]);
                self.c[l][j] = f * self.c[l][j] + i * cand;
                self.h[l][j] = o * self.c[l][j].tanh();
            }
            x = self.h[l].clone();
        }
        (self.model.head.weights.dot(&x) + &self.model.head.bias).to_vec()
    }
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    Activation::Softmax.apply(&mut grad);
    let mut loss = 0.0;
    for (mut row, &t) in grad.rows_mut().into_iter().zip(targets) {
        loss -= row[t].max(1e-300).ln();
        row[t] -= 1.0;
        row.mapv_inplace(|v| v / n);
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    /// Units per recurrent layer.
    pub units: usize,
    pub layers: usize,
    pub epochs: usize,
    /// Truncated BPTT window in characters.
    pub seq_len: usize,
    /// Learning rate at the first epoch.
    pub lr: f64,
    /// Learning rate at the last epoch; cosine-annealed in between.
    pub min_lr: f64,
    /// Number of parallel character streams per update.
    pub batch_size: usize,
    pub dropout: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            units: 128,
            layers: 3,
            epochs: 100,
            seq_len: 128,
            lr: 5e-3,
            min_lr: 1e-4,
            batch_size: 8,
            dropout: 0.2,
            clip_norm: 5.0,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LstmError::Config(m));
        if !ALLOWED_UNITS.contains(&self.units) {
            return bad(format!("units must be one of {ALLOWED_UNITS:?}, got {}", self.units));
        }
        if !(1..=MAX_LAYERS).contains(&self.layers) {
            return bad(format!("layers must be 1..={MAX_LAYERS}, got {}", self.layers));
        }
        if self.epochs == 0 || self.seq_len == 0 || self.batch_size == 0 {
            return bad("epochs, seq_len and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.lr) {
            return bad(format!("min_lr must lie in (0, lr], got {}", self.min_lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Per-epoch losses plus the best epoch's model.
#[derive(Debug, Clone)]
pub struct TrainedLstm {
    pub model: LstmStack,
    /// Mean training cross-entropy per epoch, nats per character.
    pub history: Vec<f64>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Splits `ids` into `batch` contiguous streams laid out for [`LstmStack::forward_window`].
fn stream_layout(ids: &[usize], batch: usize) -> (usize, Vec<usize>, Vec<usize>) {
    let stream_len = (ids.len() - 1) / batch;
    let mut inputs = vec![0; stream_len * batch];
    let mut targets = vec![0; stream_len * batch];
    for b in 0..batch {
        for t in 0..stream_len {
            inputs[t * batch + b] = ids[b * stream_len + t];
            targets[t * batch + b] = ids[b * stream_len + t + 1];
        }
    }
    (stream_len, inputs, targets)
}

pub fn train_char_lstm(corpus: &str, config: &LstmConfig, seed: u64) -> Result<TrainedLstm> {
    config.validate()?;
    let ids = CharVocab.encode(corpus)?;
    if ids.len() <= config.seq_len {
        return Err(TextError::TooShort {
            len: ids.len(),
            needed: config.seq_len,
        }
        .into());
    }
    let mut rng = seed::rng(seed);
    let mut model = LstmStack::new(CharVocab.len(), config.units, config.layers, config.dropout, &mut rng);
    let batch = config.batch_size.min((ids.len() - 1) / config.seq_len).max(1);
    let (stream_len, inputs, targets) = stream_layout(&ids, batch);
    let mut adam = Adam::new(config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0, model.clone());

    for epoch in 1..=config.epochs {
        adam.lr = cosine_lr(config.lr, config.min_lr, epoch, config.epochs);
        let mut state = LstmState::zeros(&model, batch);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut t0 = 0;
        while t0 < stream_len {
            let t1 = (t0 + config.seq_len).min(stream_len);
            let span = t0 * batch..t1 * batch;
            let (loss, mut grads, next) = model.window_loss_and_grad(
                &inputs[span.clone()],
                &targets[span],
                batch,
                &state,
                Some(&mut rng),
            );
            grads.clip_norm(config.clip_norm);
            adam.step(&mut model, &grads)?;
            state = next;
            let n = (t1 - t0) * batch;
            total += loss * n as f64;
            count += n;
            t0 = t1;
        }
        let epoch_loss = total / count as f64;
        log::debug!("lstm epoch {epoch}: loss {epoch_loss:.4}");
        history.push(epoch_loss);
        if epoch_loss < best.0 {
            best = (epoch_loss, epoch, model.clone());
        }
    }
    let (best_loss, best_epoch, model) = best;
    Ok(TrainedLstm {
        model,
        history,
        best_epoch,
        best_loss,
    })
}

/// Exactly `n` characters following a discarded warm-up line (see
/// [`text::WARMUP_LIMIT`]). Temperature 0 is greedy.
pub fn sample_chars(model: &LstmStack, n: usize, temperature: f64, seed: u64) -> Result<String> {
    text::check_temperature(temperature)?;
    let mut rng = seed::rng(seed);
    let mut sampler = model.sampler();
    let newline = CharVocab.newline();
    let mut token = newline;
    for _ in 0..text::WARMUP_LIMIT {
        token = text::sample_index(&sampler.step(token), temperature, &mut rng)?;
        if token == newline {
            break;
        }
    }
    let mut out = String::with_capacity(n);
    for _ in 0..n {
        let logits = sampler.step(token);
        token = text::sample_index(&logits, temperature, &mut rng)?;
        out.push(CharVocab.symbol(token)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub units: usize,
    pub layers: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub final_loss: f64,
}

impl GridRow {
    /// `LSTM(128,128,128)` style label.
    pub fn label(&self) -> String {
        format!("LSTM({})", vec![self.units.to_string(); self.layers].join(","))
    }
}

/// Trains every `units x layers` combination and reports each best epoch.
pub fn benchmark_grid(
    corpus: &str,
    units: &[usize],
    layers: &[usize],
    base: &LstmConfig,
    seed: u64,
) -> Result<Vec<GridRow>> {
    let cells: Vec<(usize, usize)> = units
        .iter()
        .flat_map(|&u| layers.iter().map(move |&l| (u, l)))
        .collect();
    cells
        .par_iter()
        .map(|&(u, l)| {
            let config = LstmConfig {
                units: u,
                layers: l,
                ..base.clone()
            };
            let cell_seed = seed::derive_seed(seed, &["lstm-grid", &u.to_string(), &l.to_string()]);
            let trained = train_char_lstm(corpus, &config, cell_seed)?;
            Ok(GridRow {
                units: u,
                layers: l,
                best_loss: trained.best_loss,
                best_epoch: trained.best_epoch,
                final_loss: *trained.history.last().expect("epochs > 0"),
            })
        })
        .collect()
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("model,units,layers,best_loss,best_epoch,final_loss\n");
    for r in rows {
        out.push_str(&format!(
            "\"{}\",{},{},{:.6},{},{:.6}\n",
            r.label(),
            r.units,
            r.layers,
            r.best_loss,
            r.best_epoch,
            r.final_loss
        ));
    }
    out
}

pub fn grid_markdown(rows: &[GridRow]) -> String {
    let mut out = String::from("| Model | Best Loss | Epoch |\n|---|---|---|\n");
    for r in rows {
        out.push_str(&format!("| {} | {:.4} | {} |\n", r.label(), r.best_loss, r.best_epoch));
    }
    out
}

/// Cross-entropy of `model` on `corpus` in evaluation mode (no dropout).
pub fn evaluate_loss(model: &LstmStack, corpus: &str) -> Result<f64> {
    let ids = CharVocab.encode(corpus)?;
    if ids.len() < 2 {
        return Err(TextError::TooShort { len: ids.len(), needed: 1 }.into());
    }
    let pass = model.forward_window(&ids[..ids.len() - 1], 1, &LstmState::zeros(model, 1), None);
    Ok(softmax_cross_entropy(&pass.logits, &ids[1..]).0)
}
