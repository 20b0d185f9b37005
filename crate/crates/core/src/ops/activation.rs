use std::hash::{Hash, Hasher};

use super::KinkPattern;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor};

#[derive(Clone, Debug, Default)]
pub struct ReluCtx {
    active: Option<(Shape4, Vec<bool>)>,
}

impl ReluCtx {
    pub fn new() -> Self {
        Self::default()
    }
}

impl KinkPattern for ReluCtx {
    fn hash_pattern<H: Hasher>(&self, state: &mut H) {
        if let Some((_, mask)) = &self.active {
            mask.hash(state);
        }
    }
}

pub fn relu<T: Real>(x: &Tensor<T>, ctx: &mut ReluCtx) -> Tensor<T> {
    let mut mask = Vec::with_capacity(x.data().len());
    let mut out = Vec::with_capacity(x.data().len());
    for &v in x.data() {
        let on = v > T::zero();
        mask.push(on);
        out.push(if on { v } else { T::zero() });
    }
    ctx.active = Some((x.shape(), mask));
    Tensor::from_parts(x.shape(), out)
}

/// The derivative at exactly zero is taken as zero.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, ctx: &ReluCtx) -> Result<Tensor<T>> {
    let (shape, mask) = ctx.active.as_ref().ok_or(Error::MissingContext("relu"))?;
    if grad_out.shape() != *shape {
        return Err(Error::ShapeMismatch {
            expected: *shape,
            actual: grad_out.shape(),
        });
    }
    let data = grad_out
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &on)| if on { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(*shape, data))
}

#[derive(Clone, Debug, Default)]
pub struct SigmoidCtx<T> {
    output: Option<Tensor<T>>,
}

impl<T> SigmoidCtx<T> {
    pub fn new() -> Self {
        SigmoidCtx { output: None }
    }
}

#[inline]
fn logistic<T: Real>(v: T) -> T {
    // split by sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>, ctx: &mut SigmoidCtx<T>) -> Tensor<T> {
    let y = x.map(logistic);
    ctx.output = Some(y.clone());
    y
}

pub fn sigmoid_backward<T: Real>(grad_out: &Tensor<T>, ctx: &SigmoidCtx<T>) -> Result<Tensor<T>> {
    let y = ctx.output.as_ref().ok_or(Error::MissingContext("sigmoid"))?;
    if grad_out.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            expected: y.shape(),
            actual: grad_out.shape(),
        });
    }
    let data = grad_out
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &s)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Row-wise softmax over the `c * h * w` values of each batch item, computed
/// with the row maximum subtracted first.
pub fn softmax<T: Real>(z: &Tensor<T>) -> Tensor<T> {
    let s = z.shape();
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        let row = z.item(n);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).as_f64().exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| T::of(e / total)));
    }
    Tensor::from_vec(s, out).expect("softmax of finite logits is finite")
}
