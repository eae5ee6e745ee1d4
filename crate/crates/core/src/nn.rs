//! Fully connected networks with hand-written backprop, shared by the
//! autoencoder and the MLP service model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax_in_place, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }

    #[inline]
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

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// `y = act(W x + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.range(-limit, limit))
            .collect();
        Self {
            weights: Matrix::new(outputs, inputs, data).expect("sized by construction"),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn pre_activation(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .iter_rows()
                .zip(&self.bias)
                .map(|(w, b)| w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b),
        );
    }
}

/// A chain of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Dense>,
}

/// Loss attached to the network output.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Mean squared error per sample (averaged over output dims) against rows of the matrix.
    Values(&'a Matrix),
    /// Softmax cross-entropy against class indices.
    Classes(&'a [usize]),
}

/// Gradients laid out like the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.data().len()])
                .collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Flattened in [`Network::param`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

impl Network {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(format!(
                    "layer emits {} values but next layer expects {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Hidden layers use ReLU, the last layer uses `output`.
    pub fn glorot(widths: &[usize], output: Activation, rng: &mut Rng) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { Activation::Relu };
                Dense::glorot(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.pre_activation(&current, &mut next);
            next.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            let nw = l.weights.data().len();
            if index < nw {
                return (li, true, index);
            }
            index -= nw;
            if index < l.bias.len() {
                return (li, false, index);
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, index: usize) -> f64 {
        let (l, is_weight, i) = self.locate(index);
        if is_weight {
            self.layers[l].weights.data()[i]
        } else {
            self.layers[l].bias[i]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, is_weight, i) = self.locate(index);
        if is_weight {
            self.layers[l].weights.data_mut()[i] = value;
        } else {
            self.layers[l].bias[i] = value;
        }
    }

    /// Mean loss over `batch` (row indices of `inputs`) and its gradient.
    pub fn loss_and_gradients(
        &self,
        inputs: &Matrix,
        targets: Targets<'_>,
        batch: &[usize],
    ) -> (f64, Gradients) {
        let mut grads = Gradients::zeros_like(self);
        let depth = self.layers.len();
        let mut activations: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
        let mut pre: Vec<Vec<f64>> = vec![Vec::new(); depth];
        let mut total = 0.0;

        for &row in batch {
            activations[0].clear();
            activations[0].extend_from_slice(inputs.row(row));
            for (li, layer) in self.layers.iter().enumerate() {
                let (head, tail) = activations.split_at_mut(li + 1);
                layer.pre_activation(&head[li], &mut pre[li]);
                tail[0].clear();
                tail[0].extend(pre[li].iter().map(|&v| layer.activation.apply(v)));
            }

            // dLoss/d(output activation), or directly dLoss/d(pre) for softmax CE
            let out = &activations[depth];
            let mut delta: Vec<f64>;
            match targets {
                Targets::Values(t) => {
                    let target = t.row(row);
                    let k = out.len() as f64;
                    total += out
                        .iter()
                        .zip(target)
                        .map(|(o, y)| (o - y) * (o - y))
                        .sum::<f64>()
                        / k;
                    delta = out
                        .iter()
                        .zip(target)
                        .map(|(o, y)| 2.0 * (o - y) / k)
                        .collect();
                    let last = &self.layers[depth - 1];
                    for (d, &z) in delta.iter_mut().zip(&pre[depth - 1]) {
                        *d *= last.activation.derivative(z);
                    }
                }
                Targets::Classes(labels) => {
                    let mut probs = out.clone();
                    softmax_in_place(&mut probs);
                    let y = labels[row];
                    total += -probs[y].max(f64::MIN_POSITIVE).ln();
                    probs[y] -= 1.0;
                    delta = probs;
                    let last = &self.layers[depth - 1];
                    for (d, &z) in delta.iter_mut().zip(&pre[depth - 1]) {
                        *d *= last.activation.derivative(z);
                    }
                }
            }

            for li in (0..depth).rev() {
                let layer = &self.layers[li];
                let input = &activations[li];
                let gw = &mut grads.weights[li];
                let n_in = layer.inputs();
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row_grad = &mut gw[o * n_in..(o + 1) * n_in];
                    for (g, &a) in row_grad.iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grads.bias[li][o] += d;
                }
                if li > 0 {
                    let mut back = vec![0.0; n_in];
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        for (b, &w) in back.iter_mut().zip(layer.weights.row(o)) {
                            *b += d * w;
                        }
                    }
                    let prev = &self.layers[li - 1];
                    for (b, &z) in back.iter_mut().zip(&pre[li - 1]) {
                        *b *= prev.activation.derivative(z);
                    }
                    delta = back;
                }
            }
        }

        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        (total / n, grads)
    }

    /// Mean loss over every row.
    pub fn dataset_loss(&self, inputs: &Matrix, targets: Targets<'_>) -> f64 {
        let mut total = 0.0;
        for (i, x) in inputs.iter_rows().enumerate() {
            let out = self.forward(x).expect("dimensions checked by caller");
            total += match targets {
                Targets::Values(t) => {
                    out.iter()
                        .zip(t.row(i))
                        .map(|(o, y)| (o - y) * (o - y))
                        .sum::<f64>()
                        / out.len() as f64
                }
                Targets::Classes(labels) => {
                    let mut p = out;
                    softmax_in_place(&mut p);
                    -p[labels[i]].max(f64::MIN_POSITIVE).ln()
                }
            };
        }
        total / inputs.rows().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Hyperparameters for gradient training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Hidden/latent widths; meaning depends on the model being trained.
    pub widths: Vec<usize>,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 0,
            widths: Vec::new(),
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub(crate) fn validate(&self, samples: usize) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::domain(
                "batch_size and learning_rate must be positive",
            ));
        }
        if self.batch_size > samples {
            return Err(Error::domain(format!(
                "batch_size {} exceeds dataset size {samples}",
                self.batch_size
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::domain("layer widths must be positive"));
        }
        Ok(())
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, lr: f64, params: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { params } else { 0 };
        Self {
            kind,
            lr,
            step: 0,
            m: vec![0.0; state],
            v: vec![0.0; state],
        }
    }

    fn apply(&mut self, net: &mut Network, grads: &Gradients) {
        self.step += 1;
        let (c1, c2) = (
            1.0 - Self::BETA1.powi(self.step),
            1.0 - Self::BETA2.powi(self.step),
        );
        let mut offset = 0;
        for (li, layer) in net.layers.iter_mut().enumerate() {
            for (params, g) in [
                (layer.weights.data_mut(), &grads.weights[li]),
                (layer.bias.as_mut_slice(), &grads.bias[li]),
            ] {
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (p, g) in params.iter_mut().zip(g) {
                            *p -= self.lr * g;
                        }
                    }
                    OptimizerKind::Adam => {
                        let m = &mut self.m[offset..offset + g.len()];
                        let v = &mut self.v[offset..offset + g.len()];
                        for i in 0..g.len() {
                            m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                            v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                            params[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                        }
                    }
                }
                offset += g.len();
            }
        }
    }
}

/// Mini-batch training. Returns the full-dataset loss before training and
/// after each epoch. The network keeps the parameters with the lowest
/// recorded loss, so the final loss never exceeds the initial one.
pub fn fit(
    net: &mut Network,
    inputs: &Matrix,
    targets: Targets<'_>,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    cfg.validate(inputs.rows())?;
    let initial = net.dataset_loss(inputs, targets);
    if !initial.is_finite() {
        return Err(Error::Training {
            epoch: 0,
            reason: "initial loss is not finite".into(),
        });
    }
    let mut trace = vec![initial];
    let mut best = (initial, net.clone());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, net.param_count());
    let mut order: Vec<usize> = (0..inputs.rows()).collect();

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = net.loss_and_gradients(inputs, targets, batch);
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "batch loss became non-finite".into(),
                });
            }
            opt.apply(net, &grads);
        }
        let loss = net.dataset_loss(inputs, targets);
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "loss became non-finite".into(),
            });
        }
        trace.push(loss);
        if loss < best.0 {
            best = (loss, net.clone());
        }
    }
    *net = best.1;
    Ok(trace)
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Largest relative discrepancy between backprop and central differences.
    pub(crate) fn max_relative_error(
        net: &Network,
        inputs: &Matrix,
        targets: Targets<'_>,
        eps: f64,
    ) -> f64 {
        let batch: Vec<usize> = (0..inputs.rows()).collect();
        let analytic = net.loss_and_gradients(inputs, targets, &batch).1.flatten();
        let mut probe = net.clone();
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.param(i);
            probe.set_param(i, orig + eps);
            let up = probe.dataset_loss(inputs, targets);
            probe.set_param(i, orig - eps);
            let down = probe.dataset_loss(inputs, targets);
            probe.set_param(i, orig);
            let numeric = (up - down) / (2.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        worst
    }
}
