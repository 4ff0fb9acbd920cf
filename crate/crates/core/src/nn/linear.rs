use alloc::vec::Vec;

use super::{Param, Parameters};
use crate::rng::{normal, SeededRng};
use crate::tensor::Matrix;

/// `y = x W^T + b`, weights stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let std = crate::math::sqrt(2.0 / in_dim.max(1) as f64);
        let w = (0..in_dim * out_dim).map(|_| normal(rng) * std).collect();
        Self::from_weights(in_dim, out_dim, w, alloc::vec![0.0; out_dim])
    }

    pub fn from_weights(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weight.len(), in_dim * out_dim);
        assert_eq!(bias.len(), out_dim);
        Self { in_dim, out_dim, weight: Param::new(weight), bias: Param::new(bias) }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.in_dim, "linear input width");
        let mut y = Matrix::zeros(x.rows(), self.out_dim);
        for i in 0..x.rows() {
            let xi = x.row(i);
            let yi = y.row_mut(i);
            for (o, out) in yi.iter_mut().enumerate() {
                let w = &self.weight.value[o * self.in_dim..(o + 1) * self.in_dim];
                *out = self.bias.value[o] + crate::math::dot(w, xi);
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Matrix, grad_out: &Matrix) -> Matrix {
        let mut gx = Matrix::zeros(x.rows(), self.in_dim);
        for i in 0..x.rows() {
            let xi = x.row(i);
            let gi = grad_out.row(i);
            let gxi = gx.row_mut(i);
            for (o, &g) in gi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                self.bias.grad[o] += g;
                let base = o * self.in_dim;
                let w = &self.weight.value[base..base + self.in_dim];
                let gw = &mut self.weight.grad[base..base + self.in_dim];
                for k in 0..self.in_dim {
                    gw[k] += g * xi[k];
                    gxi[k] += g * w[k];
                }
            }
        }
        gx
    }
}

impl Parameters for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
