//! Fully-connected networks with tanh hidden units, manual backprop, and Adam.

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs × outputs`.
    pub w: DMatrix<f64>,
    pub b: RowDVector<f64>,
}

impl Dense {
    /// Glorot-normal weights, zero biases.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let sd = (2.0 / (inputs + outputs) as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive sd");
        Self {
            w: DMatrix::from_fn(inputs, outputs, |_, _| normal.sample(rng)),
            b: RowDVector::zeros(outputs),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.w;
        for mut row in out.row_iter_mut() {
            row += &self.b;
        }
        out
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Layer stack; every layer but the last is followed by tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept for the backward pass.
pub struct Tape {
    /// Input to each layer; the last entry is the network output.
    activations: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations
            .last()
            .expect("tape holds the input at least")
    }
}

/// Gradients laid out like the network's layers.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub layers: Vec<(DMatrix<f64>, RowDVector<f64>)>,
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        Self {
            layers: sizes
                .windows(2)
                .map(|s| Dense::init(s[0], s[1], rng))
                .collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("nonempty").w.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_tape(x.clone())
            .activations
            .pop()
            .expect("output")
    }

    pub fn forward_tape(&self, x: DMatrix<f64>) -> Tape {
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(activations.last().expect("input"));
            if i < last {
                h.apply(|v| *v = v.tanh());
            }
            activations.push(h);
        }
        Tape { activations }
    }

    /// Backpropagate `d_out = ∂L/∂output`; returns parameter gradients and `∂L/∂input`.
    pub fn backward(&self, tape: &Tape, d_out: DMatrix<f64>) -> (Gradient, DMatrix<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                // Through tanh: the stored activation is the tanh output.
                delta.zip_apply(&tape.activations[i + 1], |d, a| *d *= 1.0 - a * a);
            }
            let input = &tape.activations[i];
            let dw = input.transpose() * &delta;
            let db = RowDVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            let d_in = &delta * self.layers[i].w.transpose();
            grads.push((dw, db));
            delta = d_in;
        }
        grads.reverse();
        (Gradient { layers: grads }, delta)
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }
}

impl Gradient {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}
