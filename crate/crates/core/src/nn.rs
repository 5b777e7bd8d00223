//! Minimal building blocks for hand-differentiated models: dense layers,
//! activations, AdamW and a cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::linalg::Matrix;
use crate::rng::Rng;

/// Affine map `y = x·W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Uniform init in `±1/√in` for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(input.max(1) as f64);
        let data = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Matrix::from_vec(input, output, data).expect("weight shape"),
            bias: (0..output).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Row-batched forward pass.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (k, &a) in x.iter().enumerate() {
            if a != 0.0 {
                crate::linalg::axpy(a, self.weight.row(k), &mut y);
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense) -> Matrix {
        let dw = x.transpose().matmul(dy);
        for (g, d) in grad.weight.as_mut_slice().iter_mut().zip(dw.as_slice()) {
            *g += d;
        }
        for r in 0..dy.rows() {
            for (g, d) in grad.bias.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        dy.mul_transpose(&self.weight)
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.as_mut_slice(), &mut self.bias]
    }

    pub fn params(&self) -> [&[f64]; 2] {
        [self.weight.as_slice(), &self.bias]
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Tanh-approximated GELU.
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x))),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = libm::tanh(GELU_C * (x + 0.044715 * x * x * x));
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn map(self, pre: &Matrix) -> Matrix {
        let mut out = pre.clone();
        out.as_mut_slice().iter_mut().for_each(|v| *v = self.apply(*v));
        out
    }

    /// `dy ⊙ act'(pre)`.
    pub fn backward(self, pre: &Matrix, dy: &Matrix) -> Matrix {
        let mut out = dy.clone();
        for (o, &p) in out.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *o *= self.derivative(p);
        }
        out
    }
}

/// Decoupled weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update over matching parameter / gradient slices.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter groups");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(self.step));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(self.step));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                if lr == 0.0 {
                    continue;
                }
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * self.weight_decay * p[i];
                p[i] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Cosine decay from `base` at epoch 0 towards 0 at `total` epochs.
pub fn cosine_lr(base: f64, epoch: u32, total: u32) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * f64::from(epoch) / f64::from(total)))
}

/// Inverted dropout mask: kept entries scaled by `1/(1-rate)`, dropped are 0.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}
