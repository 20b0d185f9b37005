//! Differentiable layer kernels.
//!
//! Every op is a forward function that records what its adjoint needs in an
//! explicit context value, paired with a backward function that consumes an
//! upstream gradient. Parameter gradients accumulate into [`Param::grad`];
//! nothing is reset implicitly.

use std::hash::Hasher;

use rand::Rng;

use crate::tensor::Real;

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod pool;

pub use activation::{
    relu, relu_backward, sigmoid, sigmoid_backward, softmax, ReluCtx, SigmoidCtx,
};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCtx, BatchNormParams};
pub use conv::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, conv2d_forward_direct, output_extent,
    Conv2dCtx, Conv2dParams,
};
pub use dense::{dense_backward, dense_forward, DenseCtx, DenseParams};
pub use pool::{
    channel_pool, channel_pool_backward, global_pool_spatial, global_pool_spatial_backward,
    maxpool_backward, maxpool_forward, MaxPoolCtx, PoolCtx, PoolMode,
};

/// A trainable array with a gradient buffer of the same extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    dims: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Param {
            dims: dims.to_vec(),
            value: vec![T::zero(); len],
            grad: vec![T::zero(); len],
        }
    }

    pub fn filled(dims: &[usize], v: T) -> Self {
        let mut p = Self::zeros(dims);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// Uniform in `[-bound, bound]` with `bound = 1 / sqrt(fan_in)`.
    pub fn uniform_fan_in<R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut p = Self::zeros(dims);
        for v in p.value.iter_mut() {
            *v = T::of(rng.random_range(-bound..=bound));
        }
        p
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            dims: self.dims.clone(),
            value: self.value.iter().map(|&v| U::of(v.as_f64())).collect(),
            grad: self.grad.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Contexts that record a discrete choice (ReLU masks, max-pool winners)
/// feed it to a hasher. A gradient check uses this to spot perturbations
/// that cross a non-differentiable point.
pub trait KinkPattern {
    fn hash_pattern<H: Hasher>(&self, state: &mut H);
}
