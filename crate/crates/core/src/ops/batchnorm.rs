//! Per-channel batch normalization over the `(n, h, w)` axes.

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNormParams<T> {
    /// Scale one, shift zero, running statistics `(0, 1)`.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            scale: Param::filled(&[channels], T::one()),
            shift: Param::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Clone, Debug)]
struct Saved<T> {
    x_hat: Tensor<T>,
    /// `1/sqrt(var + eps)` per channel.
    inv_std: Vec<f64>,
    /// Whether the statistics came from the batch (and so depend on x).
    batch_stats: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BatchNormCtx<T> {
    saved: Option<Saved<T>>,
}

impl<T> BatchNormCtx<T> {
    pub fn new() -> Self {
        BatchNormCtx { saved: None }
    }
}

pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    training: bool,
    ctx: &mut BatchNormCtx<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != p.channels() {
        return Err(Error::ChannelMismatch {
            expected: p.channels(),
            actual: s.c,
        });
    }
    let plane = s.plane();
    let count = s.n * plane;
    let (mean, var) = if training {
        if count < 2 {
            return Err(Error::DegenerateBatch);
        }
        let mut mean = vec![0.0f64; s.c];
        let mut var = vec![0.0f64; s.c];
        for (i, block) in x.data().chunks_exact(plane).enumerate() {
            mean[i % s.c] += lane_sum(block, |v| v.as_f64());
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for (i, block) in x.data().chunks_exact(plane).enumerate() {
            let mu = mean[i % s.c];
            var[i % s.c] += lane_sum(block, |v| {
                let d = v.as_f64() - mu;
                d * d
            });
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let m = p.momentum;
        for c in 0..s.c {
            p.running_mean[c] = T::of((1.0 - m) * p.running_mean[c].as_f64() + m * mean[c]);
            p.running_var[c] = T::of((1.0 - m) * p.running_var[c].as_f64() + m * var[c]);
        }
        (mean, var)
    } else {
        (
            p.running_mean.iter().map(|v| v.as_f64()).collect(),
            p.running_var.iter().map(|v| v.as_f64().max(0.0)).collect(),
        )
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut x_hat = Vec::with_capacity(s.len());
    let mut y = Vec::with_capacity(s.len());
    for (i, block) in x.data().chunks_exact(plane).enumerate() {
        let c = i % s.c;
        let (mu, is) = (T::of(mean[c]), T::of(inv_std[c]));
        let (g, b) = (p.scale.value[c], p.shift.value[c]);
        for &v in block {
            let xh = (v - mu) * is;
            x_hat.push(xh);
            y.push(g * xh + b);
        }
    }
    let x_hat = Tensor::from_parts(s, x_hat);
    let y = Tensor::from_parts(s, y);
    ctx.saved = Some(Saved {
        x_hat,
        inv_std,
        batch_stats: training,
    });
    Ok(y)
}

const LANES: usize = 8;

/// Sum with independent accumulators so the loop vectorizes; the
/// association order is fixed, so results are reproducible.
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for ch in &mut chunks {
        for k in 0..LANES {
            acc[k] += f(ch[k]);
        }
    }
    for (k, &v) in chunks.remainder().iter().enumerate() {
        acc[k] += f(v);
    }
    acc.iter().sum()
}

fn lane_dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let (mut ca, mut cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            acc[k] += x[k].as_f64() * y[k].as_f64();
        }
    }
    for (k, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[k] += x.as_f64() * y.as_f64();
    }
    acc.iter().sum()
}

/// Full adjoint, including the dependence of the batch mean and variance on
/// the input when the forward pass ran in training mode.
pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor<T>,
    ctx: &BatchNormCtx<T>,
    p: &mut BatchNormParams<T>,
) -> Result<Tensor<T>> {
    let saved = ctx
        .saved
        .as_ref()
        .ok_or(Error::MissingContext("batchnorm"))?;
    let Saved {
        x_hat,
        inv_std,
        batch_stats,
    } = saved;
    let s = x_hat.shape();
    if grad_out.shape() != s {
        return Err(Error::ShapeMismatch {
            expected: s,
            actual: grad_out.shape(),
        });
    }
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let mut sum_g = vec![0.0f64; s.c];
    let mut sum_gx = vec![0.0f64; s.c];
    for (i, (gb, xb)) in grad_out
        .data()
        .chunks_exact(plane)
        .zip(x_hat.data().chunks_exact(plane))
        .enumerate()
    {
        sum_g[i % s.c] += lane_sum(gb, |g| g.as_f64());
        sum_gx[i % s.c] += lane_dot(gb, xb);
    }
    // dx = slope * (g - mean(g) - x_hat * mean(g x_hat)) in batch mode.
    let mut coef = Vec::with_capacity(s.c);
    for c in 0..s.c {
        p.shift.grad[c] += T::of(sum_g[c]);
        p.scale.grad[c] += T::of(sum_gx[c]);
        let slope = p.scale.value[c].as_f64() * inv_std[c];
        coef.push(if *batch_stats {
            (T::of(slope), T::of(-slope * sum_g[c] / count), T::of(-slope * sum_gx[c] / count))
        } else {
            (T::of(slope), T::zero(), T::zero())
        });
    }
    let mut dx = Vec::with_capacity(s.len());
    for (i, (gb, xb)) in grad_out
        .data()
        .chunks_exact(plane)
        .zip(x_hat.data().chunks_exact(plane))
        .enumerate()
    {
        let (a, b, k) = coef[i % s.c];
        dx.extend(gb.iter().zip(xb).map(|(&g, &xh)| a * g + b + k * xh));
    }
    let dx = Tensor::from_parts(s, dx);
    Ok(dx)
}
