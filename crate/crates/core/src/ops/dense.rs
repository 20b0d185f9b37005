use rand::Rng;

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Shape4, Tensor};

/// Fully connected map `y = W x + b` applied to each batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T> {
    /// `(out_features, in_features)`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> DenseParams<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        DenseParams {
            weight: Param::zeros(&[out_features, in_features]),
            bias: Some(Param::zeros(&[out_features])),
        }
    }

    pub fn without_bias(in_features: usize, out_features: usize) -> Self {
        DenseParams {
            weight: Param::zeros(&[out_features, in_features]),
            bias: None,
        }
    }

    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let dims = self.weight.dims().to_vec();
        self.weight = Param::uniform_fan_in(&dims, dims[1], rng);
        if let Some(b) = self.bias.as_mut() {
            b.value.fill(T::zero());
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Clone, Debug, Default)]
pub struct DenseCtx<T> {
    input: Option<Tensor<T>>,
}

impl<T> DenseCtx<T> {
    pub fn new() -> Self {
        DenseCtx { input: None }
    }
}

/// Accepts any input whose per-item size equals `in_features`; returns
/// `(n, out_features, 1, 1)`.
pub fn dense_forward<T: Real>(
    x: &Tensor<T>,
    p: &DenseParams<T>,
    ctx: &mut DenseCtx<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let (fin, fout) = (p.in_features(), p.out_features());
    if s.item() != fin {
        return Err(Error::ChannelMismatch {
            expected: fin,
            actual: s.item(),
        });
    }
    let out_shape = Shape4::new(s.n, fout, 1, 1)?;
    let mut y = Tensor::zeros(out_shape);
    if let Some(b) = &p.bias {
        for row in y.data_mut().chunks_mut(fout) {
            row.copy_from_slice(&b.value);
        }
    }
    gemm(false, true, s.n, fout, fin, T::one(), x.data(), &p.weight.value, T::one(), y.data_mut());
    ctx.input = Some(x.clone());
    Ok(y)
}

pub fn dense_backward<T: Real>(
    grad_out: &Tensor<T>,
    ctx: &DenseCtx<T>,
    p: &mut DenseParams<T>,
) -> Result<Tensor<T>> {
    let x = ctx.input.as_ref().ok_or(Error::MissingContext("dense"))?;
    let s = x.shape();
    let (fin, fout) = (p.in_features(), p.out_features());
    let expected = Shape4::new(s.n, fout, 1, 1)?;
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: grad_out.shape(),
        });
    }
    let g = grad_out.data();
    gemm(true, false, fout, fin, s.n, T::one(), g, x.data(), T::one(), &mut p.weight.grad);
    if let Some(b) = p.bias.as_mut() {
        for row in g.chunks(fout) {
            for (acc, &v) in b.grad.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    gemm(false, false, s.n, fin, fout, T::one(), g, &p.weight.value, T::zero(), dx.data_mut());
    Ok(dx)
}
