//! Windowed max pooling plus the global spatial and cross-channel
//! reductions used by the attention gates.

use std::hash::{Hash, Hasher};

use super::conv::output_extent;
use super::KinkPattern;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Records, for each output element, the input index that produced it.
#[derive(Clone, Debug, Default)]
pub struct MaxPoolCtx {
    saved: Option<(Shape4, Vec<usize>)>,
}

impl MaxPoolCtx {
    pub fn new() -> Self {
        Self::default()
    }
}

impl KinkPattern for MaxPoolCtx {
    fn hash_pattern<H: Hasher>(&self, state: &mut H) {
        if let Some((_, argmax)) = &self.saved {
            argmax.hash(state);
        }
    }
}

/// Non-overlapping or strided window maxima without padding. Among equal
/// values the first in row-major order wins.
pub fn maxpool_forward<T: Real>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
    ctx: &mut MaxPoolCtx,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let oh = output_extent(s.h, window, stride, 0)?;
    let ow = output_extent(s.w, window, stride, 0)?;
    let out_shape = Shape4::new(s.n, s.c, oh, ow)?;
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * s.w + j * stride;
                let mut best_v = data[best];
                for l in 0..window {
                    let row = base + (i * stride + l) * s.w + j * stride;
                    for (m, &v) in data[row..row + window].iter().enumerate() {
                        if v > best_v {
                            best_v = v;
                            best = row + m;
                        }
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
    }
    ctx.saved = Some((s, argmax));
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn maxpool_backward<T: Real>(grad_out: &Tensor<T>, ctx: &MaxPoolCtx) -> Result<Tensor<T>> {
    let (in_shape, argmax) = ctx.saved.as_ref().ok_or(Error::MissingContext("maxpool"))?;
    if grad_out.data().len() != argmax.len() || grad_out.shape().n != in_shape.n {
        return Err(Error::Shape(format!(
            "maxpool gradient {:?} does not match the cached forward",
            grad_out.shape()
        )));
    }
    let mut dx = Tensor::zeros(*in_shape);
    let d = dx.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        d[idx] += g;
    }
    Ok(dx)
}

#[derive(Clone, Debug, Default)]
pub struct PoolCtx {
    saved: Option<(PoolMode, Shape4, Vec<usize>)>,
}

impl PoolCtx {
    pub fn new() -> Self {
        Self::default()
    }
}

impl KinkPattern for PoolCtx {
    fn hash_pattern<H: Hasher>(&self, state: &mut H) {
        if let Some((PoolMode::Max, _, argmax)) = &self.saved {
            argmax.hash(state);
        }
    }
}

/// Per-channel mean or maximum over all positions: `(n,c,h,w) -> (n,c,1,1)`.
/// The mean sums the values in sorted order, so it is bitwise invariant
/// under any permutation of the positions.
pub fn global_pool_spatial<T: Real>(x: &Tensor<T>, mode: PoolMode, ctx: &mut PoolCtx) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * s.c);
    let mut argmax = Vec::new();
    for (nc, chunk) in x.data().chunks(plane).enumerate() {
        match mode {
            PoolMode::Avg => {
                let mut vals: Vec<f64> = chunk.iter().map(|v| v.as_f64()).collect();
                vals.sort_unstable_by(f64::total_cmp);
                let total: f64 = vals.iter().sum();
                out.push(T::of(total / plane as f64));
            }
            PoolMode::Max => {
                let (i, v) = first_max(chunk);
                out.push(v);
                argmax.push(nc * plane + i);
            }
        }
    }
    ctx.saved = Some((mode, s, argmax));
    Tensor::from_vec(Shape4 { n: s.n, c: s.c, h: 1, w: 1 }, out).expect("pooled finite values")
}

pub fn global_pool_spatial_backward<T: Real>(grad_out: &Tensor<T>, ctx: &PoolCtx) -> Result<Tensor<T>> {
    let (mode, s, argmax) = ctx
        .saved
        .as_ref()
        .ok_or(Error::MissingContext("global pool"))?;
    let expected = Shape4 { n: s.n, c: s.c, h: 1, w: 1 };
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: grad_out.shape(),
        });
    }
    let plane = s.plane();
    let mut dx = Tensor::zeros(*s);
    let d = dx.data_mut();
    match mode {
        PoolMode::Avg => {
            let inv = T::of(1.0 / plane as f64);
            for (chunk, &g) in d.chunks_mut(plane).zip(grad_out.data()) {
                chunk.fill(g * inv);
            }
        }
        PoolMode::Max => {
            for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                d[idx] = g;
            }
        }
    }
    Ok(dx)
}

/// Per-position mean or maximum across channels: `(n,c,h,w) -> (n,1,h,w)`.
pub fn channel_pool<T: Real>(x: &Tensor<T>, mode: PoolMode, ctx: &mut PoolCtx) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let out_shape = Shape4 { n: s.n, c: 1, h: s.h, w: s.w };
    let mut out = vec![T::zero(); out_shape.len()];
    let mut argmax = Vec::new();
    for n in 0..s.n {
        let dst = &mut out[n * plane..(n + 1) * plane];
        match mode {
            PoolMode::Avg => {
                let mut acc = vec![0.0f64; plane];
                for c in 0..s.c {
                    for (a, &v) in acc.iter_mut().zip(x.plane(n, c)) {
                        *a += v.as_f64();
                    }
                }
                for (d, a) in dst.iter_mut().zip(acc) {
                    *d = T::of(a / s.c as f64);
                }
            }
            PoolMode::Max => {
                let mut best = vec![0usize; plane];
                dst.copy_from_slice(x.plane(n, 0));
                for c in 1..s.c {
                    for (i, &v) in x.plane(n, c).iter().enumerate() {
                        if v > dst[i] {
                            dst[i] = v;
                            best[i] = c;
                        }
                    }
                }
                argmax.extend(
                    best.iter()
                        .enumerate()
                        .map(|(i, &c)| (n * s.c + c) * plane + i),
                );
            }
        }
    }
    ctx.saved = Some((mode, s, argmax));
    Tensor::from_vec(out_shape, out).expect("pooled finite values")
}

pub fn channel_pool_backward<T: Real>(grad_out: &Tensor<T>, ctx: &PoolCtx) -> Result<Tensor<T>> {
    let (mode, s, argmax) = ctx
        .saved
        .as_ref()
        .ok_or(Error::MissingContext("channel pool"))?;
    let expected = Shape4 { n: s.n, c: 1, h: s.h, w: s.w };
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: grad_out.shape(),
        });
    }
    let plane = s.plane();
    let mut dx = Tensor::zeros(*s);
    let d = dx.data_mut();
    match mode {
        PoolMode::Avg => {
            let inv = T::of(1.0 / s.c as f64);
            for n in 0..s.n {
                let g = grad_out.item(n);
                for c in 0..s.c {
                    let start = (n * s.c + c) * plane;
                    for (dst, &v) in d[start..start + plane].iter_mut().zip(g) {
                        *dst = v * inv;
                    }
                }
            }
        }
        PoolMode::Max => {
            for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                d[idx] = g;
            }
        }
    }
    Ok(dx)
}

fn first_max<T: Real>(values: &[T]) -> (usize, T) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    #[test]
    fn table_shapes() {
        let mut ctx = MaxPoolCtx::new();
        let x = Tensor::<f32>::zeros(shape(1, 16, 81, 333));
        assert_eq!(maxpool_forward(&x, 3, 3, &mut ctx).unwrap().shape(), shape(1, 16, 27, 111));
        let x = Tensor::<f32>::zeros(shape(1, 32, 27, 111));
        assert_eq!(maxpool_forward(&x, 3, 3, &mut ctx).unwrap().shape(), shape(1, 32, 9, 37));
        let x = Tensor::<f32>::zeros(shape(1, 32, 9, 37));
        let mut p = PoolCtx::new();
        assert_eq!(global_pool_spatial(&x, PoolMode::Avg, &mut p).shape(), shape(1, 32, 1, 1));
        assert_eq!(channel_pool(&x, PoolMode::Max, &mut p).shape(), shape(1, 1, 9, 37));
    }

    #[test]
    fn single_window_routes_to_max() {
        let x = Tensor::from_vec(shape(1, 1, 3, 3), vec![3.0, 1.0, 2.0, 9.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let mut ctx = MaxPoolCtx::new();
        let y = maxpool_forward(&x, 3, 3, &mut ctx).unwrap();
        assert_eq!(y.data(), &[9.0]);
        let dx = maxpool_backward(&Tensor::filled(y.shape(), 2.5), &ctx).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 2.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let x = Tensor::from_vec(shape(1, 1, 2, 2), vec![1.0f32, 5.0, 5.0, 5.0]).unwrap();
        let mut ctx = MaxPoolCtx::new();
        let y = maxpool_forward(&x, 2, 2, &mut ctx).unwrap();
        let dx = maxpool_backward(&Tensor::filled(y.shape(), 1.0), &ctx).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_errors() {
        let x = Tensor::<f32>::zeros(shape(1, 1, 8, 9));
        assert!(matches!(
            maxpool_forward(&x, 3, 3, &mut MaxPoolCtx::new()),
            Err(Error::NonIntegralExtent { .. })
        ));
        let g = Tensor::<f32>::zeros(shape(1, 1, 1, 1));
        assert!(matches!(
            maxpool_backward(&g, &MaxPoolCtx::new()),
            Err(Error::MissingContext(_))
        ));
    }

    #[test]
    fn global_pool_examples() {
        let x = Tensor::from_vec(shape(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 6.0]).unwrap();
        let mut ctx = PoolCtx::new();
        assert_eq!(global_pool_spatial(&x, PoolMode::Avg, &mut ctx).data(), &[3.0]);
        assert_eq!(global_pool_spatial(&x, PoolMode::Max, &mut ctx).data(), &[6.0]);
        let dx = global_pool_spatial_backward(&Tensor::filled(shape(1, 1, 1, 1), 1.0), &ctx).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);

        let v = Tensor::<f32>::filled(shape(2, 3, 4, 4), 1.75);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let y = global_pool_spatial(&v, mode, &mut PoolCtx::new());
            assert!(y.data().iter().all(|&a| a == 1.75));
        }
    }

    #[test]
    fn channel_pool_examples() {
        let x = Tensor::<f64>::from_fn(shape(1, 1, 2, 3), |_, _, h, w| (h * 3 + w) as f64 - 2.0);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            assert_eq!(channel_pool(&x, mode, &mut PoolCtx::new()), x);
        }
        let two = Tensor::<f64>::from_fn(shape(1, 2, 3, 3), |_, c, _, _| if c == 0 { 1.0 } else { 3.0 });
        let mut ctx = PoolCtx::new();
        assert!(channel_pool(&two, PoolMode::Avg, &mut ctx).data().iter().all(|&v| v == 2.0));
        let max = channel_pool(&two, PoolMode::Max, &mut ctx);
        assert!(max.data().iter().all(|&v| v == 3.0));
        let dx = channel_pool_backward(&Tensor::filled(max.shape(), 1.0), &ctx).unwrap();
        assert!(dx.plane(0, 0).iter().all(|&v| v == 0.0));
        assert!(dx.plane(0, 1).iter().all(|&v| v == 1.0));
    }

    fn brute_force(x: &Tensor<f32>, window: usize, stride: usize) -> Vec<f32> {
        let s = x.shape();
        let oh = (s.h - window) / stride + 1;
        let ow = (s.w - window) / stride + 1;
        let mut out = Vec::new();
        for n in 0..s.n {
            for c in 0..s.c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut vals = Vec::new();
                        for l in 0..window {
                            for m in 0..window {
                                vals.push(x.at(n, c, i * stride + l, j * stride + m));
                            }
                        }
                        out.push(vals.into_iter().fold(f32::NEG_INFINITY, f32::max));
                    }
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn maxpool_matches_window_scan(
            n in 1usize..3, c in 1usize..5, window in 1usize..4, stride in 1usize..4,
            oh in 1usize..5, ow in 1usize..5, seed in any::<u64>(),
        ) {
            let h = (oh - 1) * stride + window;
            let w = (ow - 1) * stride + window;
            prop_assume!(h <= 12 && w <= 12);
            let s = shape(n, c, h, w);
            let mut state = seed | 1;
            let x = Tensor::from_fn(s, |_, _, _, _| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                (state % 1000) as f32 / 10.0 - 50.0
            });
            let y = maxpool_forward(&x, window, stride, &mut MaxPoolCtx::new()).unwrap();
            prop_assert_eq!(y.data(), &brute_force(&x, window, stride)[..]);
        }
    }
}
