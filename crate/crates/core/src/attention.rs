//! Channel-then-spatial attention gating.
//!
//! The channel gate squeezes each feature plane to its spatial mean and
//! maximum, passes both descriptors through one shared two-layer perceptron
//! (no biases, ReLU after the first layer), sums the results and applies a
//! sigmoid. The spatial gate reduces across channels to a mean plane and a
//! max plane, stacks them as `[mean; max]`, and runs a single-output
//! convolution followed by a sigmoid. The block multiplies the input by the
//! channel gate, then the result by the spatial gate computed from it.
//!
//! Backward passes include the dependence of both gates on their input.

use std::hash::Hasher;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{
    channel_pool, channel_pool_backward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, global_pool_spatial, global_pool_spatial_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, Conv2dCtx, Conv2dParams, DenseCtx, DenseParams, KinkPattern,
    PoolCtx, PoolMode, ReluCtx, SigmoidCtx,
};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

/// Hidden width of the shared perceptron: `channels / reduction`, at least 1.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention<T> {
    /// `(hidden, C)`
    pub w0: DenseParams<T>,
    /// `(C, hidden)`
    pub w1: DenseParams<T>,
    pub reduction: usize,
}

impl<T: Real> ChannelAttention<T> {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::Invalid(format!(
                "channel attention needs positive channels and reduction, got {channels}/{reduction}"
            )));
        }
        let hidden = hidden_width(channels, reduction);
        Ok(ChannelAttention {
            w0: DenseParams::without_bias(channels, hidden),
            w1: DenseParams::without_bias(hidden, channels),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.w0.in_features()
    }

    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.w0.init_uniform(rng);
        self.w1.init_uniform(rng);
    }
}

/// One pass of a pooled descriptor through the shared perceptron.
#[derive(Clone, Debug, Default)]
struct Branch<T> {
    pool: PoolCtx,
    hidden: DenseCtx<T>,
    act: ReluCtx,
    out: DenseCtx<T>,
}

impl<T: Real> Branch<T> {
    fn forward(&mut self, f: &Tensor<T>, mode: PoolMode, cam: &ChannelAttention<T>) -> Result<Tensor<T>> {
        let d = global_pool_spatial(f, mode, &mut self.pool);
        let h = dense_forward(&d, &cam.w0, &mut self.hidden)?;
        let r = relu(&h, &mut self.act);
        dense_forward(&r, &cam.w1, &mut self.out)
    }

    fn backward(&self, grad: &Tensor<T>, cam: &mut ChannelAttention<T>) -> Result<Tensor<T>> {
        let g = dense_backward(grad, &self.out, &mut cam.w1)?;
        let g = relu_backward(&g, &self.act)?;
        let g = dense_backward(&g, &self.hidden, &mut cam.w0)?;
        global_pool_spatial_backward(&g, &self.pool)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ChannelAttentionCtx<T> {
    avg: Branch<T>,
    max: Branch<T>,
    gate: SigmoidCtx<T>,
}

impl<T: Real> KinkPattern for ChannelAttentionCtx<T> {
    fn hash_pattern<H: Hasher>(&self, state: &mut H) {
        self.avg.act.hash_pattern(state);
        self.max.act.hash_pattern(state);
        self.max.pool.hash_pattern(state);
    }
}

/// `sigmoid(W1 relu(W0 avg(f)) + W1 relu(W0 max(f)))`, shape `(n, C, 1, 1)`.
pub fn channel_attention_map<T: Real>(
    f: &Tensor<T>,
    cam: &ChannelAttention<T>,
    ctx: &mut ChannelAttentionCtx<T>,
) -> Result<Tensor<T>> {
    if f.shape().c != cam.channels() {
        return Err(Error::ChannelMismatch {
            expected: cam.channels(),
            actual: f.shape().c,
        });
    }
    let za = ctx.avg.forward(f, PoolMode::Avg, cam)?;
    let zm = ctx.max.forward(f, PoolMode::Max, cam)?;
    Ok(sigmoid(&za.add(&zm)?, &mut ctx.gate))
}

/// Gradient with respect to the feature map given the gradient of the gate.
pub fn channel_attention_backward<T: Real>(
    grad_map: &Tensor<T>,
    ctx: &ChannelAttentionCtx<T>,
    cam: &mut ChannelAttention<T>,
) -> Result<Tensor<T>> {
    let dz = sigmoid_backward(grad_map, &ctx.gate)?;
    let mut df = ctx.avg.backward(&dz, cam)?;
    df.add_assign(&ctx.max.backward(&dz, cam)?)?;
    Ok(df)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention<T> {
    /// Two input planes `[mean; max]`, one output plane, same-size padding.
    pub conv: Conv2dParams<T>,
}

impl<T: Real> SpatialAttention<T> {
    pub fn new(kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "spatial attention kernel must be odd to preserve extent, got {kernel}"
            )));
        }
        Ok(SpatialAttention {
            conv: Conv2dParams::new(1, 2, kernel, 1, kernel / 2)?,
        })
    }

    pub fn kernel(&self) -> usize {
        self.conv.kernel()
    }

    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.conv.init_uniform(rng);
    }
}

#[derive(Clone, Debug, Default)]
pub struct SpatialAttentionCtx<T> {
    avg: PoolCtx,
    max: PoolCtx,
    conv: Conv2dCtx<T>,
    gate: SigmoidCtx<T>,
}

impl<T: Real> KinkPattern for SpatialAttentionCtx<T> {
    fn hash_pattern<H: Hasher>(&self, state: &mut H) {
        self.max.hash_pattern(state);
    }
}

/// `sigmoid(conv([mean_c(f); max_c(f)]))`, shape `(n, 1, h, w)`.
pub fn spatial_attention_map<T: Real>(
    f: &Tensor<T>,
    sam: &SpatialAttention<T>,
    ctx: &mut SpatialAttentionCtx<T>,
) -> Result<Tensor<T>> {
    let avg = channel_pool(f, PoolMode::Avg, &mut ctx.avg);
    let max = channel_pool(f, PoolMode::Max, &mut ctx.max);
    let stacked = avg.concat_channels(&max)?;
    let q = conv2d_forward(&stacked, &sam.conv, &mut ctx.conv)?;
    Ok(sigmoid(&q, &mut ctx.gate))
}

pub fn spatial_attention_backward<T: Real>(
    grad_map: &Tensor<T>,
    ctx: &SpatialAttentionCtx<T>,
    sam: &mut SpatialAttention<T>,
) -> Result<Tensor<T>> {
    let dq = sigmoid_backward(grad_map, &ctx.gate)?;
    let ds = conv2d_backward(&dq, &ctx.conv, &mut sam.conv)?;
    let (d_avg, d_max) = ds.split_channels(1)?;
    let mut df = channel_pool_backward(&d_avg, &ctx.avg)?;
    df.add_assign(&channel_pool_backward(&d_max, &ctx.max)?)?;
    Ok(df)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbamBlock<T> {
    pub cam: ChannelAttention<T>,
    pub sam: SpatialAttention<T>,
}

impl<T: Real> CbamBlock<T> {
    /// Zero-initialized gates; both evaluate to 0.5 everywhere.
    pub fn new(channels: usize, reduction: usize, spatial_kernel: usize) -> Result<Self> {
        Ok(CbamBlock {
            cam: ChannelAttention::new(channels, reduction)?,
            sam: SpatialAttention::new(spatial_kernel)?,
        })
    }

    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.cam.init_uniform(rng);
        self.sam.init_uniform(rng);
    }
}

#[derive(Clone, Debug, Default)]
pub struct CbamCtx<T> {
    saved: Option<CbamSaved<T>>,
    cam: ChannelAttentionCtx<T>,
    sam: SpatialAttentionCtx<T>,
}

#[derive(Clone, Debug)]
struct CbamSaved<T> {
    input: Tensor<T>,
    channel_gate: Tensor<T>,
    refined: Tensor<T>,
    spatial_gate: Tensor<T>,
}

impl<T: Real> CbamCtx<T> {
    pub fn new() -> Self {
        CbamCtx {
            saved: None,
            cam: ChannelAttentionCtx::default(),
            sam: SpatialAttentionCtx::default(),
        }
    }

    /// Channel gate from the last forward pass.
    pub fn channel_gate(&self) -> Option<&Tensor<T>> {
        self.saved.as_ref().map(|s| &s.channel_gate)
    }

    /// Spatial gate from the last forward pass.
    pub fn spatial_gate(&self) -> Option<&Tensor<T>> {
        self.saved.as_ref().map(|s| &s.spatial_gate)
    }
}

impl<T: Real> KinkPattern for CbamCtx<T> {
    fn hash_pattern<H: Hasher>(&self, state: &mut H) {
        self.cam.hash_pattern(state);
        self.sam.hash_pattern(state);
    }
}

pub fn cbam_forward<T: Real>(
    f: &Tensor<T>,
    block: &CbamBlock<T>,
    ctx: &mut CbamCtx<T>,
) -> Result<Tensor<T>> {
    let channel_gate = channel_attention_map(f, &block.cam, &mut ctx.cam)?;
    let refined = f.broadcast_mul(&channel_gate)?;
    let spatial_gate = spatial_attention_map(&refined, &block.sam, &mut ctx.sam)?;
    let out = refined.broadcast_mul(&spatial_gate)?;
    ctx.saved = Some(CbamSaved {
        input: f.clone(),
        channel_gate,
        refined,
        spatial_gate,
    });
    Ok(out)
}

pub fn cbam_backward<T: Real>(
    grad_out: &Tensor<T>,
    ctx: &CbamCtx<T>,
    block: &mut CbamBlock<T>,
) -> Result<Tensor<T>> {
    let saved = ctx.saved.as_ref().ok_or(Error::MissingContext("cbam"))?;
    if grad_out.shape() != saved.input.shape() {
        return Err(Error::ShapeMismatch {
            expected: saved.input.shape(),
            actual: grad_out.shape(),
        });
    }
    // out = refined * Ms(refined)
    let mut d_refined = grad_out.broadcast_mul(&saved.spatial_gate)?;
    let d_spatial = grad_out.mul_reduce(&saved.refined, saved.spatial_gate.shape())?;
    d_refined.add_assign(&spatial_attention_backward(&d_spatial, &ctx.sam, &mut block.sam)?)?;

    // refined = f * Mc(f)
    let mut df = d_refined.broadcast_mul(&saved.channel_gate)?;
    let d_channel = d_refined.mul_reduce(&saved.input, saved.channel_gate.shape())?;
    df.add_assign(&channel_attention_backward(&d_channel, &ctx.cam, &mut block.cam)?)?;
    Ok(df)
}
