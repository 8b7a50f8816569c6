//! Feedforward networks with hand-written reverse mode, plain/momentum SGD
//! and a central-difference gradient checker.
//!
//! Parameters live in one flat `Vec<f64>` per network. Layer `l` occupies a
//! contiguous block holding its weight matrix (row-major, `outputs x inputs`)
//! followed by its bias.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative from the pre-activation; relu'(0) = 0.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Flat parameter storage shared by every trainable object.
pub trait Parameters {
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.values().len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    fn len(self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    shapes: Vec<LayerShape>,
    /// One per hidden layer; the output layer is linear.
    activations: Vec<Activation>,
    data: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an input")
    }
}

impl MlpParams {
    /// Network with layer widths `sizes` (input first) and Glorot-uniform
    /// weights, zero biases.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        let mut params = Self::zeros(sizes, activation);
        let mut offset = 0;
        for shape in params.shapes.clone() {
            let bound = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            for w in &mut params.data[offset..offset + shape.inputs * shape.outputs] {
                *w = rng.gen_range(-bound..bound);
            }
            offset += shape.len();
        }
        params
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least an input and an output width");
        let shapes: Vec<LayerShape> = sizes
            .windows(2)
            .map(|w| LayerShape { inputs: w[0], outputs: w[1] })
            .collect();
        let total = shapes.iter().map(|s| s.len()).sum();
        MlpParams {
            activations: vec![activation; shapes.len() - 1],
            shapes,
            data: vec![0.0; total],
        }
    }

    /// Single linear layer `y = W x + b` with `W` given row-major.
    pub fn linear(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Self {
        let outputs = weights.len();
        let inputs = weights.first().map_or(0, Vec::len);
        assert_eq!(bias.len(), outputs);
        assert!(weights.iter().all(|r| r.len() == inputs));
        let mut data: Vec<f64> = weights.into_iter().flatten().collect();
        data.extend(bias);
        MlpParams { shapes: vec![LayerShape { inputs, outputs }], activations: Vec::new(), data }
    }

    pub fn identity(dim: usize) -> Self {
        let weights = (0..dim).map(|i| (0..dim).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        Self::linear(weights, vec![0.0; dim])
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().expect("at least one layer").outputs
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// Checks shape congruence and finiteness after deserialization.
    pub fn validate(&self) -> Result<()> {
        let total: usize = self.shapes.iter().map(|s| s.len()).sum();
        check_dim(total, self.data.len())?;
        check_dim(self.shapes.len().saturating_sub(1), self.activations.len())?;
        for pair in self.shapes.windows(2) {
            check_dim(pair[0].outputs, pair[1].inputs)?;
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::Malformed { what: "network parameters", reason: "non-finite entry".into() });
        }
        Ok(())
    }

    fn layer(&self, offset: usize, shape: LayerShape) -> (&[f64], &[f64]) {
        let w_len = shape.inputs * shape.outputs;
        let block = &self.data[offset..offset + shape.len()];
        block.split_at(w_len)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut current = x.to_vec();
        let mut offset = 0;
        for (l, &shape) in self.shapes.iter().enumerate() {
            let (w, b) = self.layer(offset, shape);
            let mut next = affine(w, b, &current, shape);
            if let Some(&act) = self.activations.get(l) {
                next.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            current = next;
            offset += shape.len();
        }
        Ok(current)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        check_dim(self.input_dim(), x.len())?;
        let mut acts = Vec::with_capacity(self.shapes.len() + 1);
        let mut pre = Vec::with_capacity(self.shapes.len());
        acts.push(x.to_vec());
        let mut offset = 0;
        for (l, &shape) in self.shapes.iter().enumerate() {
            let (w, b) = self.layer(offset, shape);
            let z = affine(w, b, acts.last().expect("non-empty"), shape);
            let a = match self.activations.get(l) {
                Some(&act) => z.iter().map(|&v| act.apply(v)).collect(),
                None => z.clone(),
            };
            pre.push(z);
            acts.push(a);
            offset += shape.len();
        }
        Ok(Trace { acts, pre })
    }

    /// Accumulates the gradient of `<upstream, output>` into `grads` and
    /// returns the gradient with respect to the input.
    pub fn backward_into(&self, trace: &Trace, upstream: &[f64], grads: &mut GradBuffer) -> Result<Vec<f64>> {
        check_dim(self.output_dim(), upstream.len())?;
        check_dim(self.data.len(), grads.data.len())?;
        let mut delta = upstream.to_vec();
        let mut end = self.data.len();
        for l in (0..self.shapes.len()).rev() {
            let shape = self.shapes[l];
            let start = end - shape.len();
            if let Some(&act) = self.activations.get(l) {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[l]) {
                    *d *= act.derivative(z);
                }
            }
            let input = &trace.acts[l];
            let w_len = shape.inputs * shape.outputs;
            let (gw, gb) = grads.data[start..end].split_at_mut(w_len);
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                if d != 0.0 {
                    let row = &mut gw[o * shape.inputs..(o + 1) * shape.inputs];
                    for (g, &xi) in row.iter_mut().zip(input) {
                        *g += d * xi;
                    }
                }
            }
            let w = &self.data[start..start + w_len];
            let mut next = vec![0.0; shape.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
                    for (n, &wi) in next.iter_mut().zip(row) {
                        *n += d * wi;
                    }
                }
            }
            delta = next;
            end = start;
        }
        Ok(delta)
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<GradBuffer> {
        let trace = self.forward_trace(x)?;
        let mut grads = GradBuffer::zeros_like(self);
        self.backward_into(&trace, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Weight matrix of layer `l` (row-major) and its bias.
    pub fn layer_params(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = self.shapes[..l].iter().map(|s| s.len()).sum();
        self.layer(offset, self.shapes[l])
    }
}

impl Parameters for MlpParams {
    fn values(&self) -> &[f64] {
        &self.data
    }

    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], shape: LayerShape) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
            bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Gradient accumulator congruent with some [`Parameters`] value.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    pub data: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros_like(params: &impl Parameters) -> Self {
        GradBuffer { data: vec![0.0; params.num_params()] }
    }

    pub fn zeros(len: usize) -> Self {
        GradBuffer { data: vec![0.0; len] }
    }

    pub fn add(&mut self, other: &GradBuffer) {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `params <- params - lr * grads`.
pub fn sgd_step(params: &mut impl Parameters, grads: &GradBuffer, lr: f64) -> Result<()> {
    check_dim(params.num_params(), grads.data.len())?;
    for (p, g) in params.values_mut().iter_mut().zip(&grads.data) {
        *p -= lr * g;
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum; one instance per parameter group.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut impl Parameters, grads: &GradBuffer) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, self.lr);
        }
        check_dim(params.num_params(), grads.data.len())?;
        if self.velocity.len() != grads.data.len() {
            self.velocity = vec![0.0; grads.data.len()];
        }
        for ((p, v), g) in params.values_mut().iter_mut().zip(&mut self.velocity).zip(&grads.data) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

/// Largest relative error between `loss`'s analytic gradient and a central
/// difference, over `coords` randomly chosen coordinates (all of them when
/// fewer exist). `loss` maps a flat parameter vector to `(value, gradient)`.
pub fn grad_check<F>(params: &[f64], epsilon: f64, coords: usize, rng: &mut Rng, mut loss: F) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if params.is_empty() {
        return 0.0;
    }
    let (_, analytic) = loss(params);
    assert_eq!(analytic.len(), params.len(), "gradient length must match parameters");
    let chosen: Vec<usize> = if coords >= params.len() {
        (0..params.len()).collect()
    } else {
        sample(rng, params.len(), coords).into_vec()
    };
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in chosen {
        let original = probe[i];
        probe[i] = original + epsilon;
        let (plus, _) = loss(&probe);
        probe[i] = original - epsilon;
        let (minus, _) = loss(&probe);
        probe[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}
