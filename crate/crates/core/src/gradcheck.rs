//! Finite-difference verification of every backward pass.
//!
//! Each case is a scalar function of a flat coordinate vector (inputs and
//! parameters of one op, or every parameter of a small model). The analytic
//! gradient is compared with central differences computed in 64-bit. A
//! coordinate whose perturbation flips a discrete decision (a ReLU mask, a
//! max-pool winner) is skipped, since the function is not differentiable
//! there.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cbam_backward, cbam_forward, channel_attention_backward, channel_attention_map,
    spatial_attention_backward, spatial_attention_map, CbamBlock, CbamCtx, ChannelAttention,
    ChannelAttentionCtx, SpatialAttention, SpatialAttentionCtx,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, maxpool_backward, maxpool_forward, relu, relu_backward, sigmoid,
    sigmoid_backward, softmax, BatchNormCtx, BatchNormParams, Conv2dCtx, Conv2dParams, DenseCtx,
    DenseParams, KinkPattern, MaxPoolCtx, Param, ReluCtx, SigmoidCtx,
};
use crate::tensor::{Real, Shape4, Tensor};
use crate::train::cross_entropy;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_MAX_COORDS: usize = 400;


/// Names of all cases, in suite order.
pub const CASES: [&str; 11] = [
    "conv2d",
    "batchnorm_train",
    "relu",
    "maxpool",
    "dense",
    "sigmoid",
    "softmax_cross_entropy",
    "channel_attention",
    "spatial_attention",
    "cbam",
    "tiny_model",
];

/// Arithmetic used for the analytic gradient; finite differences are
/// always taken in 64-bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-4,
            Precision::F32 => 1e-2,
        }
    }

    /// Denominator floor of the relative error, so that gradients which are
    /// zero up to rounding (a convolution bias feeding batch norm, say) do not
    /// produce spurious failures.
    pub fn floor(self) -> f64 {
        match self {
            Precision::F64 => 1e-6,
            Precision::F32 => 1e-3,
        }
    }
}

/// Deliberate defects for testing that the harness notices broken gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Batch-norm input gradient that ignores the dependence of the batch
    /// statistics on the input.
    BatchNormBackward,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    /// Hash of the discrete decisions taken while evaluating.
    pub pattern: u64,
}

pub trait Differentiable {
    fn name(&self) -> &'static str;
    fn point(&self) -> &[f64];
    fn probe(&self, at: &[f64]) -> Result<Probe>;
    fn gradient(&self, at: &[f64], precision: Precision) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug)]
pub struct CheckConfig {
    pub step: f64,
    pub max_coords: usize,
    pub precision: Precision,
    /// Picks the coordinate subset when a case has more than `max_coords`.
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            step: DEFAULT_STEP,
            max_coords: DEFAULT_MAX_COORDS,
            precision: Precision::F64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn check(case: &dyn Differentiable, cfg: &CheckConfig) -> Result<CaseReport> {
    let x0 = case.point().to_vec();
    let base = case.probe(&x0)?;
    let grad = case.gradient(&x0, cfg.precision)?;
    if grad.len() != x0.len() {
        return Err(Error::Shape(format!(
            "{}: gradient has {} entries for {} coordinates",
            case.name(),
            grad.len(),
            x0.len()
        )));
    }
    let coords: Vec<usize> = if x0.len() <= cfg.max_coords {
        (0..x0.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked = sample(&mut rng, x0.len(), cfg.max_coords).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut report = CaseReport {
        name: case.name(),
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut x = x0.clone();
    for i in coords {
        x[i] = x0[i] + cfg.step;
        let plus = case.probe(&x)?;
        x[i] = x0[i] - cfg.step;
        let minus = case.probe(&x)?;
        x[i] = x0[i];
        if plus.pattern != base.pattern || minus.pattern != base.pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * cfg.step);
        let err = relative_error(grad[i], numeric, cfg.precision.floor());
        if !err.is_finite() {
            return Err(Error::NonFinite("gradient check"));
        }
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

/// Random instance of the named case.
pub fn build_case(name: &str, seed: u64, fault: Option<Fault>) -> Result<Box<dyn Differentiable>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match name {
        "conv2d" => Box::new(Case(ConvCase::new(&mut rng))),
        "batchnorm_train" => Box::new(Case(BatchNormCase::new(&mut rng, fault))),
        "relu" => Box::new(Case(ReluCase::new(&mut rng))),
        "maxpool" => Box::new(Case(MaxPoolCase::new(&mut rng))),
        "dense" => Box::new(Case(DenseCase::new(&mut rng))),
        "sigmoid" => Box::new(Case(SigmoidCase::new(&mut rng))),
        "softmax_cross_entropy" => Box::new(Case(SoftmaxCeCase::new(&mut rng))),
        "channel_attention" => Box::new(Case(CamCase::new(&mut rng))),
        "spatial_attention" => Box::new(Case(SamCase::new(&mut rng))),
        "cbam" => Box::new(Case(CbamCase::new(&mut rng))),
        "tiny_model" => Box::new(Case(TinyModelCase::new(&mut rng, seed)?)),
        other => return Err(Error::Invalid(format!("unknown gradient check case {other}"))),
    })
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub check: CheckConfig,
    pub fault: Option<Fault>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seeds: (0..5).collect(),
            check: CheckConfig::default(),
            fault: None,
        }
    }
}

/// Worst result of one case across all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub seeds: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub ops: Vec<OpReport>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }
}

pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Invalid("gradient check needs at least one seed".into()));
    }
    let tolerance = cfg.check.precision.tolerance();
    let mut ops = Vec::with_capacity(CASES.len());
    for name in CASES {
        let mut op = OpReport {
            name,
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
            seeds: cfg.seeds.len(),
            passed: false,
        };
        for &seed in &cfg.seeds {
            let case = build_case(name, seed, cfg.fault)?;
            let r = check(case.as_ref(), &CheckConfig { seed, ..cfg.check.clone() })?;
            op.max_rel_error = op.max_rel_error.max(r.max_rel_error);
            op.checked += r.checked;
            op.skipped += r.skipped;
        }
        op.passed = op.checked > 0 && op.max_rel_error < tolerance;
        ops.push(op);
    }
    Ok(SuiteReport { ops, tolerance })
}

/// Evaluation result of a case in arithmetic `T`.
struct Eval {
    value: f64,
    pattern: u64,
    grad: Vec<f64>,
}

trait OpCase {
    const NAME: &'static str;
    fn point(&self) -> &[f64];
    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval>;
}

struct Case<C>(C);

impl<C: OpCase> Differentiable for Case<C> {
    fn name(&self) -> &'static str {
        C::NAME
    }

    fn point(&self) -> &[f64] {
        self.0.point()
    }

    fn probe(&self, at: &[f64]) -> Result<Probe> {
        let e = self.0.run::<f64>(at, false)?;
        Ok(Probe {
            value: e.value,
            pattern: e.pattern,
        })
    }

    fn gradient(&self, at: &[f64], precision: Precision) -> Result<Vec<f64>> {
        Ok(match precision {
            Precision::F64 => self.0.run::<f64>(at, true)?.grad,
            Precision::F32 => self.0.run::<f32>(at, true)?.grad,
        })
    }
}

fn uniform<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor<T: Real>(shape: Shape4, data: &[f64]) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
}

fn param<T: Real>(dims: &[usize], data: &[f64]) -> Param<T> {
    let mut p = Param::zeros(dims);
    p.value = data.iter().map(|&v| T::of(v)).collect();
    p
}

fn widen<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.as_f64()).collect()
}

/// `sum(y * r)` and the matching upstream gradient `r`.
fn project<T: Real>(y: &Tensor<T>, r: &[f64]) -> Result<(f64, Tensor<T>)> {
    if y.data().len() != r.len() {
        return Err(Error::Shape("projection does not match output".into()));
    }
    let value = y.data().iter().zip(r).map(|(a, b)| a.as_f64() * b).sum();
    Ok((value, tensor(y.shape(), r)?))
}

fn pattern_of(parts: &[&dyn Fn(&mut DefaultHasher)]) -> u64 {
    let mut h = DefaultHasher::new();
    for p in parts {
        p(&mut h);
    }
    h.finish()
}

/// Splits a flat coordinate vector into consecutive pieces.
struct Cursor<'a> {
    at: &'a [f64],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [f64] {
        let (head, tail) = self.at.split_at(n);
        self.at = tail;
        head
    }
}

struct ConvCase {
    shape: Shape4,
    out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    point: Vec<f64>,
    proj: Vec<f64>,
}

impl ConvCase {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let configs = [(3, 1, 1, 6, 5), (3, 2, 1, 7, 9), (3, 1, 0, 5, 6), (5, 2, 2, 7, 5), (3, 3, 2, 8, 11)];
        let (kernel, stride, padding, h, w) = configs[rng.random_range(0..configs.len())];
        let shape = Shape4::new(2, 3, h, w).unwrap();
        let out = 4;
        let mut point = uniform(rng, shape.len(), -1.0, 1.0);
        point.extend(uniform(rng, out * 3 * kernel * kernel, -0.5, 0.5));
        point.extend(uniform(rng, out, -0.2, 0.2));
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let proj = uniform(rng, 2 * out * oh * ow, -1.0, 1.0);
        ConvCase { shape, out, kernel, stride, padding, point, proj }
    }
}

impl OpCase for ConvCase {
    const NAME: &'static str = "conv2d";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let mut cur = Cursor { at };
        let x = tensor::<T>(self.shape, cur.take(self.shape.len()))?;
        let mut p = Conv2dParams::new(self.out, self.shape.c, self.kernel, self.stride, self.padding)?;
        let (wn, bn) = (p.weight.len(), p.bias.len());
        p.weight = param(p.weight.dims(), cur.take(wn));
        p.bias = param(p.bias.dims(), cur.take(bn));
        let mut ctx = Conv2dCtx::new();
        let y = conv2d_forward(&x, &p, &mut ctx)?;
        let (value, g) = project(&y, &self.proj)?;
        let mut out = Vec::new();
        if grad {
            let dx = conv2d_backward(&g, &ctx, &mut p)?;
            out = widen(dx.data());
            out.extend(widen(&p.weight.grad));
            out.extend(widen(&p.bias.grad));
        }
        Ok(Eval { value, pattern: 0, grad: out })
    }
}

struct BatchNormCase {
    shape: Shape4,
    point: Vec<f64>,
    proj: Vec<f64>,
    fault: Option<Fault>,
}

impl BatchNormCase {
    fn new<R: Rng>(rng: &mut R, fault: Option<Fault>) -> Self {
        let shape = Shape4::new(3, 4, 3, 5).unwrap();
        let mut point = uniform(rng, shape.len(), -2.0, 3.0);
        point.extend(uniform(rng, 4, 0.5, 1.5));
        point.extend(uniform(rng, 4, -0.5, 0.5));
        let proj = uniform(rng, shape.len(), -1.0, 1.0);
        BatchNormCase { shape, point, proj, fault }
    }
}

impl OpCase for BatchNormCase {
    const NAME: &'static str = "batchnorm_train";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let s = self.shape;
        let mut cur = Cursor { at };
        let x = tensor::<T>(s, cur.take(s.len()))?;
        let mut p = BatchNormParams::new(s.c);
        p.scale = param(&[s.c], cur.take(s.c));
        p.shift = param(&[s.c], cur.take(s.c));
        let mut ctx = BatchNormCtx::new();
        let y = batchnorm_forward(&x, &mut p, true, &mut ctx)?;
        let (value, g) = project(&y, &self.proj)?;
        let mut out = Vec::new();
        if grad {
            let mut dx = batchnorm_backward(&g, &ctx, &mut p)?;
            if self.fault == Some(Fault::BatchNormBackward) {
                dx = frozen_stats_adjoint(&x, &g, &p);
            }
            out = widen(dx.data());
            out.extend(widen(&p.scale.grad));
            out.extend(widen(&p.shift.grad));
        }
        Ok(Eval { value, pattern: 0, grad: out })
    }
}

/// `scale / sqrt(var + eps) * g`: the batch-norm adjoint as if the batch
/// statistics were constants.
fn frozen_stats_adjoint<T: Real>(x: &Tensor<T>, g: &Tensor<T>, p: &BatchNormParams<T>) -> Tensor<T> {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut slope = vec![0.0; s.c];
    for c in 0..s.c {
        let vals: Vec<f64> = (0..s.n).flat_map(|n| widen(x.plane(n, c))).collect();
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        slope[c] = p.scale.value[c].as_f64() / (var + p.eps).sqrt();
    }
    Tensor::from_fn(s, |n, c, h, w| T::of(slope[c] * g.at(n, c, h, w).as_f64()))
}

struct ReluCase {
    shape: Shape4,
    point: Vec<f64>,
    proj: Vec<f64>,
}

impl ReluCase {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let shape = Shape4::new(2, 3, 4, 5).unwrap();
        ReluCase {
            shape,
            point: uniform(rng, shape.len(), -1.0, 1.0),
            proj: uniform(rng, shape.len(), -1.0, 1.0),
        }
    }
}

impl OpCase for ReluCase {
    const NAME: &'static str = "relu";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let x = tensor::<T>(self.shape, at)?;
        let mut ctx = ReluCtx::new();
        let y = relu(&x, &mut ctx);
        let (value, g) = project(&y, &self.proj)?;
        let grad = if grad { widen(relu_backward(&g, &ctx)?.data()) } else { Vec::new() };
        Ok(Eval {
            value,
            pattern: pattern_of(&[&|h| ctx.hash_pattern(h)]),
            grad,
        })
    }
}

struct MaxPoolCase {
    shape: Shape4,
    window: usize,
    stride: usize,
    point: Vec<f64>,
    proj: Vec<f64>,
}

impl MaxPoolCase {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let configs = [(3, 3, 6, 9), (2, 2, 6, 8), (3, 2, 7, 9)];
        let (window, stride, h, w) = configs[rng.random_range(0..configs.len())];
        let shape = Shape4::new(2, 2, h, w).unwrap();
        let outputs = 2 * 2 * ((h - window) / stride + 1) * ((w - window) / stride + 1);
        MaxPoolCase {
            shape,
            window,
            stride,
            point: uniform(rng, shape.len(), -1.0, 1.0),
            proj: uniform(rng, outputs, -1.0, 1.0),
        }
    }
}

impl OpCase for MaxPoolCase {
    const NAME: &'static str = "maxpool";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let x = tensor::<T>(self.shape, at)?;
        let mut ctx = MaxPoolCtx::new();
        let y = maxpool_forward(&x, self.window, self.stride, &mut ctx)?;
        let (value, g) = project(&y, &self.proj)?;
        let grad = if grad { widen(maxpool_backward(&g, &ctx)?.data()) } else { Vec::new() };
        Ok(Eval {
            value,
            pattern: pattern_of(&[&|h| ctx.hash_pattern(h)]),
            grad,
        })
    }
}

struct DenseCase {
    shape: Shape4,
    out: usize,
    point: Vec<f64>,
    proj: Vec<f64>,
}

impl DenseCase {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let shape = Shape4::new(3, 5, 2, 2).unwrap();
        let out = 6;
        let mut point = uniform(rng, shape.len(), -1.0, 1.0);
        point.extend(uniform(rng, out * 20, -0.5, 0.5));
        point.extend(uniform(rng, out, -0.5, 0.5));
        DenseCase {
            shape,
            out,
            point,
            proj: uniform(rng, 3 * out, -1.0, 1.0),
        }
    }
}

impl OpCase for DenseCase {
    const NAME: &'static str = "dense";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let fin = self.shape.item();
        let mut cur = Cursor { at };
        let x = tensor::<T>(self.shape, cur.take(self.shape.len()))?;
        let mut p = DenseParams::new(fin, self.out);
        p.weight = param(&[self.out, fin], cur.take(self.out * fin));
        p.bias = Some(param(&[self.out], cur.take(self.out)));
        let mut ctx = DenseCtx::new();
        let y = dense_forward(&x, &p, &mut ctx)?;
        let (value, g) = project(&y, &self.proj)?;
        let mut out = Vec::new();
        if grad {
            out = widen(dense_backward(&g, &ctx, &mut p)?.data());
            out.extend(widen(&p.weight.grad));
            out.extend(widen(&p.bias.as_ref().expect("bias").grad));
        }
        Ok(Eval { value, pattern: 0, grad: out })
    }
}

struct SigmoidCase {
    shape: Shape4,
    point: Vec<f64>,
    proj: Vec<f64>,
}

impl SigmoidCase {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let shape = Shape4::new(2, 3, 4, 4).unwrap();
        SigmoidCase {
            shape,
            point: uniform(rng, shape.len(), -4.0, 4.0),
            proj: uniform(rng, shape.len(), -1.0, 1.0),
        }
    }
}

impl OpCase for SigmoidCase {
    const NAME: &'static str = "sigmoid";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let x = tensor::<T>(self.shape, at)?;
        let mut ctx = SigmoidCtx::new();
        let y = sigmoid(&x, &mut ctx);
        let (value, g) = project(&y, &self.proj)?;
        let grad = if grad { widen(sigmoid_backward(&g, &ctx)?.data()) } else { Vec::new() };
        Ok(Eval { value, pattern: 0, grad })
    }
}

struct SoftmaxCeCase {
    shape: Shape4,
    labels: Vec<usize>,
    point: Vec<f64>,
}

impl SoftmaxCeCase {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let shape = Shape4::new(4, 6, 1, 1).unwrap();
        SoftmaxCeCase {
            shape,
            labels: (0..4).map(|_| rng.random_range(0..6)).collect(),
            point: uniform(rng, shape.len(), -3.0, 3.0),
        }
    }
}

impl OpCase for SoftmaxCeCase {
    const NAME: &'static str = "softmax_cross_entropy";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], _grad: bool) -> Result<Eval> {
        let z = tensor::<T>(self.shape, at)?;
        let (value, g) = cross_entropy(&softmax(&z), &self.labels)?;
        Ok(Eval {
            value,
            pattern: 0,
            grad: widen(g.data()),
        })
    }
}

struct CamCase {
    shape: Shape4,
    reduction: usize,
    point: Vec<f64>,
    proj: Vec<f64>,
}

impl CamCase {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let shape = Shape4::new(2, 8, 5, 6).unwrap();
        let reduction = 2;
        let hidden = 4;
        let mut point = uniform(rng, shape.len(), -1.0, 1.0);
        point.extend(uniform(rng, 2 * hidden * 8, -0.8, 0.8));
        CamCase {
            shape,
            reduction,
            point,
            proj: uniform(rng, 2 * 8, -1.0, 1.0),
        }
    }
}

fn set_cam<T: Real>(cam: &mut ChannelAttention<T>, cur: &mut Cursor) {
    let d0 = cam.w0.weight.dims().to_vec();
    let d1 = cam.w1.weight.dims().to_vec();
    cam.w0.weight = param(&d0, cur.take(d0[0] * d0[1]));
    cam.w1.weight = param(&d1, cur.take(d1[0] * d1[1]));
}

impl OpCase for CamCase {
    const NAME: &'static str = "channel_attention";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let mut cur = Cursor { at };
        let x = tensor::<T>(self.shape, cur.take(self.shape.len()))?;
        let mut cam = ChannelAttention::new(self.shape.c, self.reduction)?;
        set_cam(&mut cam, &mut cur);
        let mut ctx = ChannelAttentionCtx::default();
        let y = channel_attention_map(&x, &cam, &mut ctx)?;
        let (value, g) = project(&y, &self.proj)?;
        let mut out = Vec::new();
        if grad {
            out = widen(channel_attention_backward(&g, &ctx, &mut cam)?.data());
            out.extend(widen(&cam.w0.weight.grad));
            out.extend(widen(&cam.w1.weight.grad));
        }
        Ok(Eval {
            value,
            pattern: pattern_of(&[&|h| ctx.hash_pattern(h)]),
            grad: out,
        })
    }
}

struct SamCase {
    shape: Shape4,
    point: Vec<f64>,
    proj: Vec<f64>,
}

impl SamCase {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let shape = Shape4::new(2, 4, 6, 7).unwrap();
        let mut point = uniform(rng, shape.len(), -1.0, 1.0);
        point.extend(uniform(rng, 2 * 49, -0.3, 0.3));
        point.extend(uniform(rng, 1, -0.2, 0.2));
        SamCase {
            shape,
            point,
            proj: uniform(rng, 2 * 6 * 7, -1.0, 1.0),
        }
    }
}

fn set_sam<T: Real>(sam: &mut SpatialAttention<T>, cur: &mut Cursor) {
    let dw = sam.conv.weight.dims().to_vec();
    sam.conv.weight = param(&dw, cur.take(dw.iter().product()));
    sam.conv.bias = param(&[1], cur.take(1));
}

impl OpCase for SamCase {
    const NAME: &'static str = "spatial_attention";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let mut cur = Cursor { at };
        let x = tensor::<T>(self.shape, cur.take(self.shape.len()))?;
        let mut sam = SpatialAttention::new(7)?;
        set_sam(&mut sam, &mut cur);
        let mut ctx = SpatialAttentionCtx::default();
        let y = spatial_attention_map(&x, &sam, &mut ctx)?;
        let (value, g) = project(&y, &self.proj)?;
        let mut out = Vec::new();
        if grad {
            out = widen(spatial_attention_backward(&g, &ctx, &mut sam)?.data());
            out.extend(widen(&sam.conv.weight.grad));
            out.extend(widen(&sam.conv.bias.grad));
        }
        Ok(Eval {
            value,
            pattern: pattern_of(&[&|h| ctx.hash_pattern(h)]),
            grad: out,
        })
    }
}

struct CbamCase {
    shape: Shape4,
    point: Vec<f64>,
    proj: Vec<f64>,
}

impl CbamCase {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let shape = Shape4::new(2, 8, 5, 6).unwrap();
        let mut point = uniform(rng, shape.len(), -1.0, 1.0);
        point.extend(uniform(rng, 2 * 4 * 8, -0.8, 0.8));
        point.extend(uniform(rng, 2 * 49, -0.3, 0.3));
        point.extend(uniform(rng, 1, -0.2, 0.2));
        CbamCase {
            shape,
            point,
            proj: uniform(rng, shape.len(), -1.0, 1.0),
        }
    }
}

impl OpCase for CbamCase {
    const NAME: &'static str = "cbam";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let mut cur = Cursor { at };
        let x = tensor::<T>(self.shape, cur.take(self.shape.len()))?;
        let mut block = CbamBlock::new(self.shape.c, 2, 7)?;
        set_cam(&mut block.cam, &mut cur);
        set_sam(&mut block.sam, &mut cur);
        let mut ctx = CbamCtx::new();
        let y = cbam_forward(&x, &block, &mut ctx)?;
        let (value, g) = project(&y, &self.proj)?;
        let mut out = Vec::new();
        if grad {
            out = widen(cbam_backward(&g, &ctx, &mut block)?.data());
            out.extend(widen(&block.cam.w0.weight.grad));
            out.extend(widen(&block.cam.w1.weight.grad));
            out.extend(widen(&block.sam.conv.weight.grad));
            out.extend(widen(&block.sam.conv.bias.grad));
        }
        Ok(Eval {
            value,
            pattern: pattern_of(&[&|h| ctx.hash_pattern(h)]),
            grad: out,
        })
    }
}

/// The full network at 8x24 input with stage widths 2 and 3 and five
/// classes, trained-mode batch norm, fused softmax cross-entropy loss. The
/// coordinates are all trainable parameters.
struct TinyModelCase {
    model: Model<f64>,
    x: Tensor<f64>,
    labels: Vec<usize>,
    point: Vec<f64>,
}

pub fn tiny_model_spec() -> ModelSpec {
    ModelSpec {
        input_h: 8,
        input_w: 24,
        widths: vec![2, 3],
        pool_window: 2,
        pool_stride: 2,
        ..ModelSpec::new(5)
    }
}

impl TinyModelCase {
    fn new<R: Rng>(rng: &mut R, seed: u64) -> Result<Self> {
        let spec = tiny_model_spec();
        let mut model = Model::<f64>::build(&spec, seed)?;
        // Non-trivial affine and bias values so that every parameter matters.
        for (name, p) in model.parameters_mut() {
            if name.ends_with("bias") || name.ends_with("shift") {
                p.value = uniform(rng, p.len(), -0.2, 0.2);
            } else if name.ends_with("scale") {
                p.value = uniform(rng, p.len(), 0.5, 1.5);
            }
        }
        let x = Tensor::from_vec(spec.input_shape(3)?, uniform(rng, 3 * 8 * 24, 0.0, 1.0))?;
        let labels = (0..3).map(|_| rng.random_range(0..5)).collect();
        let point = model
            .parameters()
            .iter()
            .flat_map(|(_, p)| p.value.iter().copied())
            .collect();
        Ok(TinyModelCase { model, x, labels, point })
    }
}

impl OpCase for TinyModelCase {
    const NAME: &'static str = "tiny_model";

    fn point(&self) -> &[f64] {
        &self.point
    }

    fn run<T: Real>(&self, at: &[f64], grad: bool) -> Result<Eval> {
        let mut model = self.model.cast::<T>();
        model.set_training(true);
        let mut cur = Cursor { at };
        for (_, p) in model.parameters_mut() {
            p.value = cur.take(p.len()).iter().map(|&v| T::of(v)).collect();
        }
        let logits = model.forward_logits(&self.x.cast::<T>())?;
        let (value, g) = cross_entropy(&softmax(&logits), &self.labels)?;
        let mut out = Vec::new();
        if grad {
            model.backward(&g)?;
            out = model
                .parameters()
                .iter()
                .flat_map(|(_, p)| widen(&p.grad))
                .collect();
        }
        Ok(Eval {
            value,
            pattern: model.kink_signature(),
            grad: out,
        })
    }
}
