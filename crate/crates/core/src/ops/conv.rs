//! 2-D convolution (cross-correlation) with zero padding.
//!
//! The production path lowers each batch item to a column matrix and runs a
//! single matrix product per item. [`conv2d_forward_direct`] is the plain
//! nested-loop form, kept as an independent reference.

use rand::Rng;
use rayon::prelude::*;

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Shape4, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    /// `(out_channels, in_channels, k, k)`
    pub weight: Param<T>,
    /// `(out_channels)`
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2dParams<T> {
    /// Zero weights and bias.
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Invalid(format!(
                "conv needs positive channels, kernel and stride \
                 (out {out_channels}, in {in_channels}, k {kernel}, stride {stride})"
            )));
        }
        Ok(Conv2dParams {
            weight: Param::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Param::zeros(&[out_channels]),
            stride,
            padding,
        })
    }

    /// Weights uniform in `±1/sqrt(in_channels * k * k)`, bias zero.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let dims = self.weight.dims().to_vec();
        let fan_in = dims[1] * dims[2] * dims[3];
        self.weight = Param::uniform_fan_in(&dims, fan_in, rng);
        self.bias = Param::zeros(&[dims[0]]);
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.in_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.in_channels(),
                actual: input.c,
            });
        }
        let k = self.kernel();
        let oh = output_extent(input.h, k, self.stride, self.padding)?;
        let ow = output_extent(input.w, k, self.stride, self.padding)?;
        Shape4::new(input.n, self.out_channels(), oh, ow)
    }
}

/// `(input + 2*padding - window) / stride + 1`, rejecting negative or
/// fractional results.
pub fn output_extent(input: usize, window: usize, stride: usize, padding: usize) -> Result<usize> {
    let span = input + 2 * padding;
    if stride == 0 || window == 0 || span < window || !(span - window).is_multiple_of(stride) {
        return Err(Error::NonIntegralExtent {
            input,
            window,
            stride,
            padding,
        });
    }
    Ok((span - window) / stride + 1)
}

#[derive(Clone, Debug, Default)]
pub struct Conv2dCtx<T> {
    input: Option<Tensor<T>>,
}

impl<T> Conv2dCtx<T> {
    pub fn new() -> Self {
        Conv2dCtx { input: None }
    }

    pub fn clear(&mut self) {
        self.input = None;
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    o: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new<T: Real>(input: Shape4, p: &Conv2dParams<T>) -> Result<(Self, Shape4)> {
        let out = p.output_shape(input)?;
        Ok((
            Geom {
                c: input.c,
                h: input.h,
                w: input.w,
                k: p.kernel(),
                stride: p.stride,
                pad: p.padding,
                o: out.c,
                oh: out.h,
                ow: out.w,
            },
            out,
        ))
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `j` whose tap `m` lands inside the input row.
    fn valid_cols(&self, m: usize) -> (usize, usize) {
        let lo = if self.pad > m {
            (self.pad - m).div_ceil(self.stride)
        } else {
            0
        };
        // need j*stride + m - pad <= w - 1
        let hi = if self.w + self.pad > m {
            ((self.w + self.pad - m - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for l in 0..g.k {
            for m in 0..g.k {
                let row = (c * g.k + l) * g.k + m;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(m);
                for i in 0..g.oh {
                    let drow = &mut dst[i * g.ow..(i + 1) * g.ow];
                    let y = (i * g.stride + l) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + m - g.pad;
                        drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + j) * g.stride + m - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for l in 0..g.k {
            for m in 0..g.k {
                let row = (c * g.k + l) * g.k + m;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(m);
                for i in 0..g.oh {
                    let y = (i * g.stride + l) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let srow = &src[i * g.ow..(i + 1) * g.ow];
                    let drow = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for j in lo..hi {
                        drow[j * g.stride + m - g.pad] += srow[j];
                    }
                }
            }
        }
    }
}

/// Affine convolution `bias[o] + sum w[o,c,l,m] * x_pad[c, i*s+l, j*s+m]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    p: &Conv2dParams<T>,
    ctx: &mut Conv2dCtx<T>,
) -> Result<Tensor<T>> {
    let out = conv2d_im2col(x, p)?;
    ctx.input = Some(x.clone());
    Ok(out)
}

fn conv2d_im2col<T: Real>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let (g, out_shape) = Geom::new(x.shape(), p)?;
    let mut out = Tensor::zeros(out_shape);
    let (rows, ncols) = (g.rows(), g.cols());
    let item_in = x.shape().item();
    let weight = &p.weight.value;
    let bias = &p.bias.value;
    out.data_mut()
        .par_chunks_mut(out_shape.item())
        .enumerate()
        .for_each_init(
            || vec![T::zero(); rows * ncols],
            |cols, (n, dst)| {
                im2col(&x.data()[n * item_in..(n + 1) * item_in], &g, cols);
                gemm(false, false, g.o, ncols, rows, T::one(), weight, cols, T::zero(), dst);
                for (chunk, &b) in dst.chunks_mut(ncols).zip(bias) {
                    for v in chunk {
                        *v += b;
                    }
                }
            },
        );
    Ok(out)
}

/// Nested-loop convolution used as a reference for the column path.
pub fn conv2d_forward_direct<T: Real>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let (g, out_shape) = Geom::new(x.shape(), p)?;
    let mut out = Tensor::zeros(out_shape);
    let s = x.shape();
    let data = out.data_mut();
    let mut idx = 0;
    for n in 0..s.n {
        for o in 0..g.o {
            for i in 0..g.oh {
                for j in 0..g.ow {
                    let mut acc = p.bias.value[o];
                    for c in 0..g.c {
                        for l in 0..g.k {
                            let y = (i * g.stride + l) as isize - g.pad as isize;
                            if y < 0 || y >= g.h as isize {
                                continue;
                            }
                            for m in 0..g.k {
                                let xx = (j * g.stride + m) as isize - g.pad as isize;
                                if xx < 0 || xx >= g.w as isize {
                                    continue;
                                }
                                acc += p.weight.value[((o * g.c + c) * g.k + l) * g.k + m]
                                    * x.at(n, c, y as usize, xx as usize);
                            }
                        }
                    }
                    data[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Returns the input gradient and accumulates weight and bias gradients.
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    ctx: &Conv2dCtx<T>,
    p: &mut Conv2dParams<T>,
) -> Result<Tensor<T>> {
    backward(grad_out, ctx, p, true).map(|dx| dx.expect("input gradient requested"))
}

/// Accumulates weight and bias gradients only; used for the first layer,
/// whose input gradient is never needed.
pub fn conv2d_backward_params<T: Real>(
    grad_out: &Tensor<T>,
    ctx: &Conv2dCtx<T>,
    p: &mut Conv2dParams<T>,
) -> Result<()> {
    backward(grad_out, ctx, p, false).map(|_| ())
}

fn backward<T: Real>(
    grad_out: &Tensor<T>,
    ctx: &Conv2dCtx<T>,
    p: &mut Conv2dParams<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let x = ctx.input.as_ref().ok_or(Error::MissingContext("conv2d"))?;
    let (g, out_shape) = Geom::new(x.shape(), p)?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            expected: out_shape,
            actual: grad_out.shape(),
        });
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let s = x.shape();
    let weight = &p.weight.value;

    let mut dx = if want_input {
        Some(Tensor::zeros(s))
    } else {
        None
    };

    let per_item = |n: usize, cols: &mut Vec<T>, dcols: &mut Vec<T>, dx_item: Option<&mut [T]>| {
        let gy = grad_out.item(n);
        im2col(x.item(n), &g, cols);
        let mut dw = vec![T::zero(); g.o * rows];
        gemm(false, true, g.o, rows, ncols, T::one(), gy, cols, T::zero(), &mut dw);
        let db: Vec<T> = gy.chunks(ncols).map(|r| r.iter().copied().sum()).collect();
        if let Some(dst) = dx_item {
            gemm(true, false, rows, ncols, g.o, T::one(), weight, gy, T::zero(), dcols);
            col2im(dcols, &g, dst);
        }
        (dw, db)
    };
    let init = || (vec![T::zero(); rows * ncols], vec![T::zero(); rows * ncols]);

    let partials: Vec<(Vec<T>, Vec<T>)> = match dx.as_mut() {
        Some(dx) => dx
            .data_mut()
            .par_chunks_mut(s.item())
            .enumerate()
            .map_init(init, |(cols, dcols), (n, dst)| per_item(n, cols, dcols, Some(dst)))
            .collect(),
        None => (0..s.n)
            .into_par_iter()
            .map_init(init, |(cols, dcols), n| per_item(n, cols, dcols, None))
            .collect(),
    };

    // fixed-order reduction keeps results independent of the thread count
    for (dw, db) in &partials {
        for (acc, &v) in p.weight.grad.iter_mut().zip(dw) {
            *acc += v;
        }
        for (acc, &v) in p.bias.grad.iter_mut().zip(db) {
            *acc += v;
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    fn random_tensor(s: Shape4, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(s, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn table_shape_conv1() {
        let p = Conv2dParams::<f32>::new(16, 1, 5, 1, 2).unwrap();
        assert_eq!(p.output_shape(shape(1, 1, 81, 333)).unwrap(), shape(1, 16, 81, 333));
    }

    #[test]
    fn three_by_three_ones() {
        let x = Tensor::from_vec(shape(1, 1, 3, 3), (1..=9).map(|v| v as f64).collect()).unwrap();
        let mut p = Conv2dParams::<f64>::new(1, 1, 3, 1, 1).unwrap();
        p.weight.value.fill(1.0);
        let mut ctx = Conv2dCtx::new();
        for y in [
            conv2d_forward(&x, &p, &mut ctx).unwrap(),
            conv2d_forward_direct(&x, &p).unwrap(),
        ] {
            assert_eq!(y.at(0, 0, 1, 1), 45.0);
            assert_eq!(y.at(0, 0, 0, 0), 12.0);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(shape(2, 3, 6, 7), &mut rng);
        let mut p = Conv2dParams::<f64>::new(4, 3, 3, 1, 1).unwrap();
        p.bias.value = vec![0.5, -1.0, 2.0, 0.0];
        let y = conv2d_forward(&x, &p, &mut Conv2dCtx::new()).unwrap();
        for n in 0..2 {
            for o in 0..4 {
                assert!(y.plane(n, o).iter().all(|&v| v == p.bias.value[o]));
            }
        }
    }

    #[test]
    fn errors() {
        let p = Conv2dParams::<f32>::new(2, 3, 3, 2, 0).unwrap();
        let x = Tensor::<f32>::zeros(shape(1, 2, 6, 6));
        assert!(matches!(
            conv2d_forward(&x, &p, &mut Conv2dCtx::new()),
            Err(Error::ChannelMismatch { .. })
        ));
        let x = Tensor::<f32>::zeros(shape(1, 3, 6, 6));
        assert!(matches!(
            conv2d_forward(&x, &p, &mut Conv2dCtx::new()),
            Err(Error::NonIntegralExtent { .. })
        ));
        let mut p = Conv2dParams::<f32>::new(1, 1, 3, 1, 1).unwrap();
        let g = Tensor::<f32>::zeros(shape(1, 1, 4, 4));
        assert!(matches!(
            conv2d_backward(&g, &Conv2dCtx::new(), &mut p),
            Err(Error::MissingContext(_))
        ));
    }

    #[test]
    fn zero_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(shape(2, 2, 5, 5), &mut rng);
        let mut p = Conv2dParams::<f64>::new(3, 2, 3, 1, 1).unwrap();
        p.init_uniform(&mut rng);
        let mut ctx = Conv2dCtx::new();
        let y = conv2d_forward(&x, &p, &mut ctx).unwrap();
        let dx = conv2d_backward(&Tensor::zeros(y.shape()), &ctx, &mut p).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(p.weight.grad.iter().all(|&v| v == 0.0));
        assert!(p.bias.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(shape(2, 3, 4, 5), &mut rng);
        let mut p = Conv2dParams::<f64>::new(2, 3, 1, 1, 0).unwrap();
        p.init_uniform(&mut rng);
        let mut ctx = Conv2dCtx::new();
        let y = conv2d_forward(&x, &p, &mut ctx).unwrap();
        let gy = random_tensor(y.shape(), &mut rng);
        let dx = conv2d_backward(&gy, &ctx, &mut p).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        let expect: f64 = (0..2)
                            .map(|o| p.weight.value[o * 3 + c] * gy.at(n, o, h, w))
                            .sum();
                        assert!((dx.at(n, c, h, w) - expect).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(shape(1, 1, 5, 5), &mut rng);
        let mut p = Conv2dParams::<f64>::new(1, 1, 3, 1, 1).unwrap();
        p.init_uniform(&mut rng);
        p.bias.value[0] = 0.3;
        let mut ctx = Conv2dCtx::new();
        let y = conv2d_forward(&x, &p, &mut ctx).unwrap();
        let proj = random_tensor(y.shape(), &mut rng);
        let dx = conv2d_backward(&proj, &ctx, &mut p).unwrap();
        let loss = |x: &Tensor<f64>, p: &Conv2dParams<f64>| -> f64 {
            let y = conv2d_forward_direct(x, p).unwrap();
            y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
        for i in 0..9 {
            let mut pp = p.clone();
            pp.weight.value[i] += h;
            let mut pm = p.clone();
            pm.weight.value[i] -= h;
            let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            assert!((fd - p.weight.grad[i]).abs() <= 1e-4 * fd.abs().max(1e-6));
        }
        let bias_grad: f64 = proj.data().iter().sum();
        assert!((p.bias.grad[0] - bias_grad).abs() < 1e-12);
    }

    #[test]
    fn strided_padded_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, pad, h, w) in [(3, 2, 1, 7, 9), (2, 2, 0, 6, 8), (5, 3, 2, 10, 13), (1, 1, 0, 3, 2)] {
            let x = random_tensor(shape(2, 3, h, w), &mut rng);
            let mut p = Conv2dParams::<f64>::new(4, 3, k, s, pad).unwrap();
            p.init_uniform(&mut rng);
            let fast = conv2d_forward(&x, &p, &mut Conv2dCtx::new()).unwrap();
            let slow = conv2d_forward_direct(&x, &p).unwrap();
            assert!(fast.allclose(&slow, 1e-12, 1e-12).unwrap());
        }
    }
}
