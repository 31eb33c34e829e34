use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative at a pre-activation value. The ReLU subgradient at exactly 0 is 0.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected layer computing `activation(x · Wᵀ + b)` row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Parameter gradients of one [`DenseLayer`], shaped like the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weight: Matrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            weight: self.weight.scale(s),
            bias: self.bias.iter().map(|b| b * s).collect(),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &DenseGrads, s: f64) -> Result<()> {
        self.weight.add_scaled(&other.weight, s)?;
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.weight.as_slice().iter().chain(&self.bias).all(|&v| v == 0.0)
    }
}

/// Activations recorded by one forward call, consumed by the matching backward call.
#[derive(Debug)]
pub struct GradTape {
    saved: Option<Saved>,
}

#[derive(Debug)]
struct Saved {
    input: Matrix,
    pre_activation: Matrix,
}

impl GradTape {
    pub fn is_consumed(&self) -> bool {
        self.saved.is_none()
    }

    /// Smallest |pre-activation| seen by a ReLU, used to keep finite differences off kinks.
    pub(crate) fn relu_margin(&self, activation: Activation) -> f64 {
        match (&self.saved, activation) {
            (Some(s), Activation::Relu) => s
                .pre_activation
                .as_slice()
                .iter()
                .fold(f64::INFINITY, |m, v| m.min(v.abs())),
            _ => f64::INFINITY,
        }
    }

    pub(crate) fn relu_pattern(&self, activation: Activation, out: &mut Vec<bool>) {
        if let (Some(s), Activation::Relu) = (&self.saved, activation) {
            out.extend(s.pre_activation.as_slice().iter().map(|&v| v > 0.0));
        }
    }
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dims("DenseLayer::new", weight.shape(), (bias.len(), 1)));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in ±√(6/(in+out)), zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Self {
            weight: Matrix::from_vec(out_dim, in_dim, data).expect("sized above"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Flat parameter `k`: weights first (row-major), then bias.
    pub fn param_mut(&mut self, k: usize) -> &mut f64 {
        let nw = self.weight.rows() * self.weight.cols();
        if k < nw {
            &mut self.weight.as_mut_slice()[k]
        } else {
            &mut self.bias[k - nw]
        }
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, GradTape)> {
        let pre = self.pre_activation(input)?;
        let output = pre.map(|v| self.activation.apply(v));
        let tape = GradTape {
            saved: Some(Saved {
                input: input.clone(),
                pre_activation: pre,
            }),
        };
        Ok((output, tape))
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.pre_activation(input)?.map(|v| self.activation.apply(v)))
    }

    fn pre_activation(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_dim() {
            return Err(Error::dims("dense_forward", input.shape(), self.weight.shape()));
        }
        let mut pre = input.matmul_t(&self.weight)?;
        for i in 0..pre.rows() {
            for (v, b) in pre.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(pre)
    }

    /// Chain rule through the layer. Consumes the tape; a second call errors.
    pub fn backward(&self, tape: &mut GradTape, upstream: &Matrix) -> Result<(Matrix, DenseGrads)> {
        let saved = tape
            .saved
            .take()
            .ok_or_else(|| Error::Usage("gradient tape already consumed".into()))?;
        if upstream.shape() != saved.pre_activation.shape() {
            return Err(Error::dims(
                "dense_backward",
                upstream.shape(),
                saved.pre_activation.shape(),
            ));
        }
        if saved.input.cols() != self.in_dim() {
            return Err(Error::dims("dense_backward", saved.input.shape(), self.weight.shape()));
        }
        let mut delta = upstream.clone();
        if self.activation != Activation::Identity {
            for (d, &p) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(saved.pre_activation.as_slice())
            {
                *d *= self.activation.derivative(p);
            }
        }
        let input_grad = delta.matmul(&self.weight)?;
        let weight = delta.t_matmul(&saved.input)?;
        let bias = delta.column_sums();
        Ok((input_grad, DenseGrads { weight, bias }))
    }
}

/// Free-function form of [`DenseLayer::forward`].
pub fn dense_forward(layer: &DenseLayer, input: &Matrix) -> Result<(Matrix, GradTape)> {
    layer.forward(input)
}

/// Free-function form of [`DenseLayer::backward`].
pub fn dense_backward(
    layer: &DenseLayer,
    tape: &mut GradTape,
    upstream: &Matrix,
) -> Result<(Matrix, DenseGrads)> {
    layer.backward(tape, upstream)
}

/// A chain of dense layers applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug)]
pub struct SequentialTape {
    tapes: Vec<GradTape>,
}

impl SequentialTape {
    pub(crate) fn relu_margin(&self, seq: &Sequential) -> f64 {
        self.tapes
            .iter()
            .zip(&seq.layers)
            .map(|(t, l)| t.relu_margin(l.activation))
            .fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn relu_pattern(&self, seq: &Sequential, out: &mut Vec<bool>) {
        for (t, l) in self.tapes.iter().zip(&seq.layers) {
            t.relu_pattern(l.activation, out);
        }
    }
}

impl Sequential {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims(
                    "Sequential::new",
                    pair[0].weight.shape(),
                    pair[1].weight.shape(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Layers `dims[0] → dims[1] → …`, all with `hidden` activation except the last.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                DenseLayer::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, SequentialTape)> {
        let mut x = input.clone();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, tape) = layer.forward(&x)?;
            tapes.push(tape);
            x = y;
        }
        Ok((x, SequentialTape { tapes }))
    }

    pub fn infer(&self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Returns the input gradient and one [`DenseGrads`] per layer, in layer order.
    pub fn backward(
        &self,
        tape: &mut SequentialTape,
        upstream: &Matrix,
    ) -> Result<(Matrix, Vec<DenseGrads>)> {
        if tape.tapes.len() != self.layers.len() {
            return Err(Error::Usage("tape does not match layer stack".into()));
        }
        let mut grad = upstream.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (layer, t) in self.layers.iter().zip(tape.tapes.iter_mut()).rev() {
            let (g_in, g) = layer.backward(t, &grad)?;
            grads.push(g);
            grad = g_in;
        }
        grads.reverse();
        Ok((grad, grads))
    }

    pub fn zero_grads(&self) -> Vec<DenseGrads> {
        self.layers.iter().map(DenseGrads::zeros_like).collect()
    }
}
