//! Dense multilayer perceptrons with a hand-written backward pass.
//!
//! Only what the denoiser and the detection head need: affine layers, one
//! activation shared by all hidden layers, gradients with respect to the
//! parameters and to a slice of the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Identity,
}

impl Activation {
    pub fn code(self) -> u16 {
        match self {
            Activation::Silu => 1,
            Activation::Identity => 0,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform Glorot initialization, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f32).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, x: &[f32], y: &mut Vec<f32>) {
        debug_assert_eq!(x.len(), self.inputs);
        y.clear();
        y.extend(
            self.weight
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| b + dot(row, x)),
        );
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent accumulators so the loop vectorizes; the summation
    // order is fixed, which keeps results bit-reproducible.
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// A stack of dense layers. The activation is applied between layers, never
/// after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Intermediate values kept by [`Mlp::forward_traced`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f32>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f32>>,
}

impl Trace {
    pub fn output(&self) -> &[f32] {
        self.pre.last().expect("mlp has at least one layer")
    }
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(1.0, &b.weight, &mut a.weight);
            axpy(1.0, &b.bias, &mut a.bias);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|v| *v *= s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f32 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt()
    }
}

impl Mlp {
    /// Glorot-initialized network with the given layer widths
    /// (`widths[0]` is the input dimension).
    pub fn new<R: Rng>(widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an mlp needs an input and an output width");
        let layers = widths
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        assert!(widths.len() >= 2, "an mlp needs an input and an output width");
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut current = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&current, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            std::mem::swap(&mut current, &mut next);
        }
        current
    }

    pub fn forward_traced(&self, x: &[f32]) -> Trace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward_into(&current, &mut out);
            let next = if i < last {
                out.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(out);
        }
        Trace { inputs, pre }
    }

    /// Backpropagates `grad_out` (d loss / d output) through the network.
    ///
    /// Parameter gradients are accumulated into `grads` when given. Returns
    /// the gradient with respect to `input[input_range]`.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: &[f32],
        mut grads: Option<&mut MlpGrads>,
        input_range: std::ops::Range<usize>,
    ) -> Vec<f32> {
        let mut delta = grad_out.to_vec();
        let mut grad_input = vec![0.0f32; input_range.len()];
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &trace.inputs[i];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, x, &mut gl.weight[o * layer.inputs..(o + 1) * layer.inputs]);
                    }
                    gl.bias[o] += d;
                }
            }
            if i == 0 {
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                        axpy(d, &row[input_range.clone()], &mut grad_input);
                    }
                }
            } else {
                let mut prev = vec![0.0f32; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, &layer.weight[o * layer.inputs..(o + 1) * layer.inputs], &mut prev);
                    }
                }
                let pre = &trace.pre[i - 1];
                for (p, &z) in prev.iter_mut().zip(pre) {
                    *p *= self.activation.derivative(z);
                }
                delta = prev;
            }
        }
        grad_input
    }

    pub fn params(&self) -> impl Iterator<Item = &f32> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias))
    }
}

/// Sums per-item gradients over `items`, processed in fixed-size chunks on
/// the rayon pool and reduced in chunk order. Returns the summed gradient
/// and the summed per-item loss; the result is independent of thread count.
pub fn chunked_gradients<T, F>(net: &Mlp, items: &[T], chunk: usize, per_item: F) -> (MlpGrads, f32)
where
    T: Sync,
    F: Fn(&T, &mut MlpGrads) -> f32 + Sync,
{
    use rayon::prelude::*;
    let partials: Vec<(MlpGrads, f32)> = items
        .par_chunks(chunk.max(1))
        .map(|part| {
            let mut grads = MlpGrads::zeros_like(net);
            let loss = part.iter().map(|it| per_item(it, &mut grads)).sum::<f32>();
            (grads, loss)
        })
        .collect();
    let mut total = MlpGrads::zeros_like(net);
    let mut loss = 0.0f32;
    for (g, l) in &partials {
        total.add_assign(g);
        loss += l;
    }
    (total, loss)
}

/// SGD with heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Debug, Clone)]
pub struct Momentum {
    velocity: MlpGrads,
    pub learning_rate: f32,
    pub momentum: f32,
}

impl Momentum {
    pub fn new(net: &Mlp, learning_rate: f32, momentum: f32) -> Self {
        Self {
            velocity: MlpGrads::zeros_like(net),
            learning_rate,
            momentum,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) {
        for ((layer, v), g) in net.layers.iter_mut().zip(&mut self.velocity.layers).zip(&grads.layers) {
            for ((p, vv), gv) in layer.weight.iter_mut().zip(&mut v.weight).zip(&g.weight) {
                *vv = self.momentum * *vv + gv;
                *p -= self.learning_rate * *vv;
            }
            for ((p, vv), gv) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                *vv = self.momentum * *vv + gv;
                *p -= self.learning_rate * *vv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Either optimizer behind one `step` call.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Momentum),
    Adam(Adam),
}

impl Optimizer {
    /// `momentum` is ignored by Adam.
    pub fn new(kind: OptimizerKind, net: &Mlp, learning_rate: f32, momentum: f32) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd(Momentum::new(net, learning_rate, momentum)),
            OptimizerKind::Adam => Self::Adam(Adam::new(net, learning_rate)),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) {
        match self {
            Self::Sgd(o) => o.step(net, grads),
            Self::Adam(o) => o.step(net, grads),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    first: MlpGrads,
    second: MlpGrads,
    step: i32,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f32) -> Self {
        Self {
            first: MlpGrads::zeros_like(net),
            second: MlpGrads::zeros_like(net),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let update = |p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.first.layers[i], &mut self.second.layers[i], &grads.layers[i]);
            update(&mut layer.weight, &mut m.weight, &mut v.weight, &g.weight);
            update(&mut layer.bias, &mut m.bias, &mut v.bias, &g.bias);
        }
    }
}
