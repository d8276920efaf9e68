//! Dense networks with exact gradients, Adam, and checkpointing.

mod adam;
pub mod checkpoint;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use thiserror::Error;

pub use adam::{cosine_lr, Adam};
pub use checkpoint::{Checkpoint, CheckpointError, Tensor};

use crate::dataset::ClassWeights;
use crate::seed::Rng;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("layer {layer}: expected input width {expected}, got {found}")]
    Shape {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite gradient in parameter tensor {0}")]
    NonFiniteGradient(usize),
    #[error("optimizer state covers {expected} tensors but {found} were supplied")]
    ParamMismatch { expected: usize, found: usize },
    #[error("tensor {index} has {found} values, optimizer state expects {expected}")]
    TensorSize {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("loss requires a single sigmoid output unit")]
    NotBinary,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Anything with an ordered list of trainable tensors. Gradients use the
/// same type as the model, so both sides enumerate tensors identically.
pub trait Params {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero(&mut self) {
        for p in self.params_mut() {
            p.fill(0.0);
        }
    }

    fn scale(&mut self, factor: f64) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn l2_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.l2_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// All parameters flattened in tensor order.
    fn flat(&self) -> Vec<f64> {
        self.params().concat()
    }
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters use standard layout")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters use standard layout")
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters use standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters use standard layout")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Identity,
}

impl Activation {
    pub fn code(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Sigmoid => 1.0,
            Activation::Tanh => 2.0,
            Activation::Softmax => 3.0,
            Activation::Identity => 4.0,
        }
    }

    pub fn from_code(code: f64) -> Option<Self> {
        Some(match code as i64 {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            2 => Activation::Tanh,
            3 => Activation::Softmax,
            4 => Activation::Identity,
            _ => return None,
        })
    }

    /// Applies the activation in place to a `[batch x units]` matrix.
    pub fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
            Activation::Softmax => {
                for mut row in z.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
            }
        }
    }

    /// Gradient w.r.t. the pre-activation given the activation output `a`
    /// and the gradient `da` w.r.t. that output.
    pub fn backward(self, a: &Array2<f64>, mut da: Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => {
                da.zip_mut_with(a, |g, &y| {
                    if y <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            Activation::Sigmoid => da.zip_mut_with(a, |g, &y| *g *= y * (1.0 - y)),
            Activation::Tanh => da.zip_mut_with(a, |g, &y| *g *= 1.0 - y * y),
            Activation::Identity => {}
            Activation::Softmax => {
                for (mut g, y) in da.rows_mut().into_iter().zip(a.rows()) {
                    let dot: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                    g.zip_mut_with(&y, |gi, &yi| *gi = yi * (*gi - dot));
                }
            }
        }
        da
    }
}

/// Uniform He initialization bound for ReLU layers, Xavier otherwise.
pub fn init_bound(activation: Activation, fan_in: usize, fan_out: usize) -> f64 {
    match activation {
        Activation::Relu => (6.0 / fan_in as f64).sqrt(),
        _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    }
}

pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[out x in]`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(n_in: usize, n_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = init_bound(activation, n_in, n_out);
        Self {
            weights: uniform_matrix(n_out, n_in, bound, rng),
            bias: Array1::zeros(n_out),
            activation,
        }
    }

    pub fn zeros(n_in: usize, n_out: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((n_out, n_in)),
            bias: Array1::zeros(n_out),
            activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }

    /// Pre-activation `x W^T + b`.
    pub fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t());
        z += &self.bias;
        z
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.affine(x);
        self.activation.apply(&mut z);
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Params for Mlp {
    fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [slice2(&l.weights), slice1(&l.bias)])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [slice2_mut(&mut l.weights), slice1_mut(&mut l.bias)])
            .collect()
    }
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`; hidden layers share one activation.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Self {
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.n_in(), l.n_out(), l.activation))
                .collect(),
        }
    }

    /// `[input, hidden..., output]` widths.
    pub fn topology(&self) -> Vec<usize> {
        let mut t = vec![self.layers[0].n_in()];
        t.extend(self.layers.iter().map(|l| l.n_out()));
        t
    }

    /// Activations of every layer, last one being the network output.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { acts[i - 1].view() };
            if input.ncols() != layer.n_in() {
                return Err(NnError::Shape {
                    layer: i,
                    expected: layer.n_in(),
                    found: input.ncols(),
                });
            }
            let a = layer.forward(input);
            acts.push(a);
        }
        Ok(acts)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.pop().expect("network has at least one layer"))
    }

    /// Reverse-mode gradients given `d_out`, the gradient w.r.t. the last
    /// layer's pre-activation.
    pub fn backward(&self, x: ArrayView2<f64>, acts: &[Array2<f64>], d_out: Array2<f64>) -> Mlp {
        let mut grads = self.zeros_like();
        let mut dz = d_out;
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 { x } else { acts[i - 1].view() };
            grads.layers[i].weights = dz.t().dot(&input);
            grads.layers[i].bias = dz.sum_axis(Axis(0));
            if i > 0 {
                let da = dz.dot(&self.layers[i].weights);
                dz = self.layers[i - 1].activation.backward(&acts[i - 1], da);
            }
        }
        grads
    }

    /// Mean class-weighted binary cross-entropy over the batch and its gradient.
    ///
    /// The output gradient uses the logit form `w (p - y)`, which is the exact
    /// derivative wherever `p` lies inside the clamping band.
    pub fn bce_loss_and_grad(&self, x: ArrayView2<f64>, y: &[f64], weights: &ClassWeights) -> Result<(f64, Mlp)> {
        self.require_binary()?;
        let acts = self.forward(x)?;
        let p = acts.last().unwrap();
        let n = y.len() as f64;
        let mut loss = 0.0;
        let mut d_out = Array2::zeros((y.len(), 1));
        for (i, &yi) in y.iter().enumerate() {
            let w = weights.for_target(yi);
            let (l, _) = weighted_bce_loss(p[[i, 0]], yi, weights);
            loss += l;
            d_out[[i, 0]] = w * (p[[i, 0]] - yi) / n;
        }
        Ok((loss / n, self.backward(x, &acts, d_out)))
    }

    pub fn bce_loss(&self, x: ArrayView2<f64>, y: &[f64], weights: &ClassWeights) -> Result<f64> {
        self.require_binary()?;
        let p = self.predict(x)?;
        let total: f64 = y
            .iter()
            .enumerate()
            .map(|(i, &yi)| weighted_bce_loss(p[[i, 0]], yi, weights).0)
            .sum();
        Ok(total / y.len() as f64)
    }

    fn require_binary(&self) -> Result<()> {
        match self.layers.last() {
            Some(l) if l.n_out() == 1 && l.activation == Activation::Sigmoid => Ok(()),
            _ => Err(NnError::NotBinary),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push(Tensor::scalar("kind.mlp", 1.0));
        for (i, l) in self.layers.iter().enumerate() {
            c.push(Tensor::new(
                format!("layer{i}.weight"),
                vec![l.n_out(), l.n_in()],
                slice2(&l.weights).to_vec(),
            ));
            c.push(Tensor::new(format!("layer{i}.bias"), vec![l.n_out()], slice1(&l.bias).to_vec()));
            c.push(Tensor::scalar(format!("layer{i}.activation"), l.activation.code()));
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("mlp")?;
        let mut layers = Vec::new();
        while c.contains(&format!("layer{}.weight", layers.len())) {
            let i = layers.len();
            let w = c.get(&format!("layer{i}.weight"))?;
            if w.shape.len() != 2 {
                return Err(CheckpointError::Meta {
                    name: w.name.clone(),
                    reason: "weights must be rank 2".into(),
                }
                .into());
            }
            let (n_out, n_in) = (w.shape[0], w.shape[1]);
            if let Some(prev) = layers.last().map(|l: &DenseLayer| l.n_out()) {
                if prev != n_in {
                    return Err(NnError::Shape {
                        layer: i,
                        expected: prev,
                        found: n_in,
                    });
                }
            }
            let bias = c.data(&format!("layer{i}.bias"), &[n_out])?;
            let code_name = format!("layer{i}.activation");
            let activation = Activation::from_code(c.scalar(&code_name)?).ok_or(CheckpointError::Meta {
                name: code_name,
                reason: "unknown activation code".into(),
            })?;
            layers.push(DenseLayer {
                weights: Array2::from_shape_vec((n_out, n_in), w.data.clone()).expect("shape checked"),
                bias: Array1::from(bias.to_vec()),
                activation,
            });
        }
        if layers.is_empty() {
            return Err(CheckpointError::Missing("layer0.weight".into()).into());
        }
        Ok(Self { layers })
    }
}

/// Class-weighted binary cross-entropy for one prediction and `dL/dp`.
pub fn weighted_bce_loss(p: f64, y: f64, weights: &ClassWeights) -> (f64, f64) {
    let w = weights.for_target(y);
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let loss = -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let grad = -w * (y / p - (1.0 - y) / (1.0 - p));
    (loss, grad)
}
