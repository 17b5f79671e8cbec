//! Two-layer perceptron with ReLU hidden units and explicit backprop.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Cached activations for the backward pass.
pub struct Forward {
    pub hidden: Array2<f64>,
    pub out: Array2<f64>,
}

impl Mlp {
    pub fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let he = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("valid std");
        let xavier = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("valid std");
        Self {
            w1: Array2::from_shape_fn((hidden, inputs), |_| he.sample(rng)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_fn((outputs, hidden), |_| 0.1 * xavier.sample(rng)),
            b2: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.ncols()
    }

    /// `x` is `samples × inputs`.
    pub fn forward(&self, x: &Array2<f64>) -> Forward {
        let mut hidden = x.dot(&self.w1.t()) + &self.b1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let out = hidden.dot(&self.w2.t()) + &self.b2;
        Forward { hidden, out }
    }

    pub fn backward(&self, x: &Array2<f64>, fwd: &Forward, d_out: &Array2<f64>) -> MlpGrad {
        let w2 = d_out.t().dot(&fwd.hidden);
        let b2 = d_out.sum_axis(Axis(0));
        let mut d_hidden = d_out.dot(&self.w2);
        ndarray::Zip::from(&mut d_hidden)
            .and(&fwd.hidden)
            .for_each(|d, &h| {
                if h <= 0.0 {
                    *d = 0.0;
                }
            });
        let w1 = d_hidden.t().dot(x);
        let b1 = d_hidden.sum_axis(Axis(0));
        MlpGrad { w1, b1, w2, b2 }
    }

    pub fn zeros_like(&self) -> MlpGrad {
        MlpGrad {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    /// Heavy-ball step: `v ← μ·v + g; θ ← θ − lr·v`.
    pub fn sgd_step(&mut self, grad: &MlpGrad, velocity: &mut MlpGrad, lr: f64, momentum: f64) {
        fn step<D: ndarray::Dimension>(
            p: &mut ndarray::Array<f64, D>,
            g: &ndarray::Array<f64, D>,
            v: &mut ndarray::Array<f64, D>,
            lr: f64,
            mu: f64,
        ) {
            ndarray::Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                *v = mu * *v + g;
                *p -= lr * *v;
            });
        }
        step(&mut self.w1, &grad.w1, &mut velocity.w1, lr, momentum);
        step(&mut self.b1, &grad.b1, &mut velocity.b1, lr, momentum);
        step(&mut self.w2, &grad.w2, &mut velocity.w2, lr, momentum);
        step(&mut self.b2, &grad.b2, &mut velocity.b2, lr, momentum);
    }
}
