//! A small fully connected ReLU network with hand-written backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::LabeledBatch;
use crate::error::{invalid, Result};
use crate::loss::{loss_grad, LossSpec};

use super::data::FeatureSet;

/// Dense layer computing `W x + b`, with `W` stored row-major (outputs x inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }

    fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Multilayer perceptron; ReLU on hidden layers, raw logits at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Parameter-shaped gradient (or momentum) buffers.
pub type Gradients = Mlp;

impl Mlp {
    /// Builds a network with the given widths (input, hidden..., classes).
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(invalid(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| Layer::init(w[0], w[1], &mut rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut current = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&current, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut current, &mut next);
        }
        current
    }

    /// Logits for every row of `data`, paired with its labels.
    pub fn predict(&self, data: &FeatureSet) -> Result<LabeledBatch> {
        if data.dim != self.input_dim() {
            return Err(invalid(format!(
                "feature dimension {} does not match network input {}",
                data.dim,
                self.input_dim()
            )));
        }
        let logits = (0..data.len()).flat_map(|i| self.forward(data.row(i))).collect();
        LabeledBatch::new(logits, data.labels.clone(), self.classes())
    }

    /// Mean loss over the given samples and its gradient with respect to
    /// every parameter. `rows` index into `data`.
    pub fn loss_and_grad(
        &self,
        data: &FeatureSet,
        rows: &[usize],
        loss: &LossSpec,
    ) -> Result<(f64, Gradients)> {
        if rows.is_empty() {
            return Err(invalid("empty minibatch"));
        }
        let scale = 1.0 / rows.len() as f64;
        let mut grads = self.zeros_like();
        let mut total = 0.0;
        // activations[l] is the input to layer l; the final entry holds the logits.
        let mut activations: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len() + 1];
        let mut delta = Vec::new();
        let mut back = Vec::new();

        for &r in rows {
            activations[0].clear();
            activations[0].extend_from_slice(data.row(r));
            let last = self.layers.len() - 1;
            for (l, layer) in self.layers.iter().enumerate() {
                let (head, tail) = activations.split_at_mut(l + 1);
                layer.forward_into(&head[l], &mut tail[0]);
                if l < last {
                    tail[0].iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }

            let out = loss_grad(loss, &activations[self.layers.len()], data.labels[r])?;
            total += out.loss;
            delta.clear();
            delta.extend(out.grad_logits.iter().map(|g| g * scale));

            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &activations[l];
                let g = &mut grads.layers[l];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (w, x) in row.iter_mut().zip(input) {
                        *w += d * x;
                    }
                }
                if l > 0 {
                    back.clear();
                    back.resize(layer.inputs, 0.0);
                    for (o, d) in delta.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (b, w) in back.iter_mut().zip(row) {
                            *b += d * w;
                        }
                    }
                    // ReLU gate: the stored activation is zero wherever the unit was off.
                    for (b, a) in back.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *b = 0.0;
                        }
                    }
                    std::mem::swap(&mut delta, &mut back);
                }
            }
        }
        Ok((total * scale, grads))
    }

    /// All parameters flattened layer by layer (weights, then bias).
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameters().len() {
            return Err(invalid("parameter vector has the wrong length"));
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Euclidean norm of the weight matrices (biases excluded).
    pub fn weight_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.weights)
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }
}

/// SGD with heavy-ball momentum and L2 weight decay on weight matrices.
///
/// Each step forms `d = g + weight_decay * w` (biases take `d = g`), updates
/// `v = momentum * v + d`, then moves `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients, lr: f64) {
        let velocity = self.velocity.get_or_insert_with(|| model.zeros_like());
        for ((layer, g), v) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut velocity.layers)
        {
            for ((w, gw), vw) in layer.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
                *vw = self.momentum * *vw + gw + self.weight_decay * *w;
                *w -= lr * *vw;
            }
            for ((b, gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vb = self.momentum * *vb + gb;
                *b -= lr * *vb;
            }
        }
    }
}
