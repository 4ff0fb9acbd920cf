//! Minimal layer library with explicit forward/backward passes.
//!
//! Forward passes borrow weights immutably and return whatever the backward
//! pass needs; backward passes accumulate into each [`Param`]'s gradient
//! buffer. There is no tape: the composite models in
//! [`crate::encoders`] wire the chain rule by hand.

mod conv;
mod linear;
mod optim;
mod param;
mod pool;

pub use conv::Conv2d;
pub use linear::Linear;
pub use optim::{AdamW, AdamWConfig, StepDecay};
pub use param::{checksum, grad_norm, num_params, zero_grad, Param, Parameters};
pub use pool::{adaptive_avg_pool, adaptive_avg_pool_backward, global_avg_pool, global_avg_pool_backward};

use crate::tensor::{FeatureMap, Matrix};

pub fn relu_map(x: &FeatureMap) -> FeatureMap {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_matrix(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Mask `grad` in place by `activated > 0`.
pub fn relu_backward_in_place(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}
