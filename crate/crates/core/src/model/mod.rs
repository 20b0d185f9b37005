//! The full network: convolution stages, an optional attention block, and a
//! dense softmax head.
//!
//! Each stage is `conv -> batch norm -> ReLU -> max pool`. With the default
//! `ModelSpec` the stages produce `16x81x333 -> 16x27x111 -> 32x27x111 -> 32x9x37`,
//! which flattens to 10656 features.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::attention::{cbam_backward, cbam_forward, CbamBlock, CbamCtx, DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL};
use crate::error::{Error, Result};
use crate::ops::batchnorm::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_backward_params,
    conv2d_forward, dense_backward, dense_forward, maxpool_backward, maxpool_forward, output_extent,
    relu, relu_backward, softmax, BatchNormCtx, BatchNormParams, Conv2dCtx, Conv2dParams,
    DenseCtx, DenseParams, KinkPattern, MaxPoolCtx, Param, ReluCtx,
};
use crate::rng::{stream_rng, STREAM_INIT};
use crate::tensor::{Real, Shape4, Tensor};

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointInfo};

pub const INPUT_HEIGHT: usize = 81;
pub const INPUT_WIDTH: usize = 333;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels of each convolution stage.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub use_cbam: bool,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelSpec {
    /// The reference architecture with attention, for `num_classes` outputs.
    pub fn new(num_classes: usize) -> Self {
        ModelSpec {
            input_channels: 1,
            input_h: INPUT_HEIGHT,
            input_w: INPUT_WIDTH,
            widths: vec![16, 32],
            kernel: 5,
            pool_window: 3,
            pool_stride: 3,
            use_cbam: true,
            reduction: DEFAULT_REDUCTION,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
            num_classes,
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }

    /// The same network without the attention block.
    pub fn basic(num_classes: usize) -> Self {
        ModelSpec {
            use_cbam: false,
            ..Self::new(num_classes)
        }
    }

    /// Convolution padding that keeps the spatial extent.
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn input_shape(&self, batch: usize) -> Result<Shape4> {
        Shape4::new(batch, self.input_channels, self.input_h, self.input_w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Invalid("stage widths must be non-empty and positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Invalid(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.reduction == 0 || self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::Invalid("reduction must be positive and the spatial kernel odd".into()));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Invalid("batch norm eps must be positive and momentum in (0,1]".into()));
        }
        self.stage_shapes(1).map(|_| ())
    }

    /// Output shape of every layer in order, for a batch of `batch` inputs.
    pub fn stage_shapes(&self, batch: usize) -> Result<Vec<(String, Shape4)>> {
        let mut shape = self.input_shape(batch)?;
        let mut out = Vec::new();
        let pad = self.padding();
        for (i, &width) in self.widths.iter().enumerate() {
            let h = output_extent(shape.h, self.kernel, 1, pad)?;
            let w = output_extent(shape.w, self.kernel, 1, pad)?;
            shape = Shape4::new(batch, width, h, w)?;
            out.push((format!("conv{}", i + 1), shape));
            out.push((format!("bn{}", i + 1), shape));
            out.push((format!("relu{}", i + 1), shape));
            let h = output_extent(shape.h, self.pool_window, self.pool_stride, 0)?;
            let w = output_extent(shape.w, self.pool_window, self.pool_stride, 0)?;
            shape = Shape4::new(batch, width, h, w)?;
            out.push((format!("pool{}", i + 1), shape));
        }
        if self.use_cbam {
            out.push(("cbam".into(), shape));
        }
        out.push(("flatten".into(), Shape4::new(batch, shape.item(), 1, 1)?));
        out.push(("head.dense".into(), Shape4::new(batch, self.num_classes, 1, 1)?));
        Ok(out)
    }

    /// Shape of the feature map entering the head.
    pub fn feature_shape(&self, batch: usize) -> Result<Shape4> {
        let shapes = self.stage_shapes(batch)?;
        let (_, s) = shapes
            .iter()
            .rev()
            .find(|(name, _)| name.starts_with("pool"))
            .expect("at least one stage");
        Ok(*s)
    }

    pub fn flatten_width(&self) -> Result<usize> {
        Ok(self.feature_shape(1)?.item())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage<T> {
    pub conv: Conv2dParams<T>,
    pub bn: BatchNormParams<T>,
}

#[derive(Clone, Debug, Default)]
struct StageCtx<T> {
    conv: Conv2dCtx<T>,
    bn: BatchNormCtx<T>,
    relu: ReluCtx,
    pool: MaxPoolCtx,
}

#[derive(Clone, Debug)]
struct ForwardCtx<T> {
    stages: Vec<StageCtx<T>>,
    cbam: CbamCtx<T>,
    head: DenseCtx<T>,
    feature_shape: Option<Shape4>,
}

/// An instantiated network. A model owns the context of its most recent
/// forward pass, so it is used by one thread at a time.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    seed: u64,
    pub stages: Vec<ConvStage<T>>,
    pub cbam: Option<CbamBlock<T>>,
    pub head: DenseParams<T>,
    training: bool,
    ctx: ForwardCtx<T>,
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model. Convolution, dense and attention
    /// weights are uniform in `±1/sqrt(fan_in)` drawn in a fixed order from a
    /// generator derived from `seed`; biases are zero, batch-norm scale one and
    /// shift zero.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, STREAM_INIT);
        let mut stages = Vec::with_capacity(spec.widths.len());
        let mut channels = spec.input_channels;
        for &width in &spec.widths {
            let mut conv = Conv2dParams::new(width, channels, spec.kernel, 1, spec.padding())?;
            conv.init_uniform(&mut rng);
            let mut bn = BatchNormParams::new(width);
            bn.eps = spec.bn_eps;
            bn.momentum = spec.bn_momentum;
            stages.push(ConvStage { conv, bn });
            channels = width;
        }
        let cbam = if spec.use_cbam {
            let mut block = CbamBlock::new(channels, spec.reduction, spec.spatial_kernel)?;
            block.init_uniform(&mut rng);
            Some(block)
        } else {
            None
        };
        let mut head = DenseParams::new(spec.flatten_width()?, spec.num_classes);
        head.init_uniform(&mut rng);
        let ctx = ForwardCtx {
            stages: vec![StageCtx::default(); stages.len()],
            cbam: CbamCtx::new(),
            head: DenseCtx::new(),
            feature_shape: None,
        };
        Ok(Model {
            spec: spec.clone(),
            seed,
            stages,
            cbam,
            head,
            training: true,
            ctx,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Training mode normalizes with batch statistics and updates the running
    /// estimates; inference mode uses the running estimates only.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Pre-softmax scores, `(n, num_classes, 1, 1)`.
    pub fn forward_logits(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let expected = self.spec.input_shape(x.shape().n)?;
        if x.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: x.shape(),
            });
        }
        let training = self.training;
        let (window, stride) = (self.spec.pool_window, self.spec.pool_stride);
        let mut h = x.clone();
        for (stage, ctx) in self.stages.iter_mut().zip(self.ctx.stages.iter_mut()) {
            h = conv2d_forward(&h, &stage.conv, &mut ctx.conv)?;
            h = batchnorm_forward(&h, &mut stage.bn, training, &mut ctx.bn)?;
            h = relu(&h, &mut ctx.relu);
            h = maxpool_forward(&h, window, stride, &mut ctx.pool)?;
        }
        if let Some(block) = &self.cbam {
            h = cbam_forward(&h, block, &mut self.ctx.cbam)?;
        }
        self.ctx.feature_shape = Some(h.shape());
        dense_forward(&h.flatten(), &self.head, &mut self.ctx.head)
    }

    /// Class probabilities, `(n, num_classes, 1, 1)`.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(softmax(&self.forward_logits(x)?))
    }

    /// Index of the most probable class for each row; ties go to the lower index.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward_logits(x)?))
    }

    /// Accumulates every parameter gradient from the gradient of the loss with
    /// respect to the logits of the last forward pass.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let feature_shape = self
            .ctx
            .feature_shape
            .ok_or(Error::MissingContext("model"))?;
        let g = dense_backward(grad_logits, &self.ctx.head, &mut self.head)?;
        let mut g = g.reshape(feature_shape)?;
        if let Some(block) = self.cbam.as_mut() {
            g = cbam_backward(&g, &self.ctx.cbam, block)?;
        }
        for (i, (stage, ctx)) in self
            .stages
            .iter_mut()
            .zip(self.ctx.stages.iter())
            .enumerate()
            .rev()
        {
            g = maxpool_backward(&g, &ctx.pool)?;
            g = relu_backward(&g, &ctx.relu)?;
            g = batchnorm_backward(&g, &ctx.bn, &mut stage.bn)?;
            if i == 0 {
                conv2d_backward_params(&g, &ctx.conv, &mut stage.conv)?;
            } else {
                g = conv2d_backward(&g, &ctx.conv, &mut stage.conv)?;
            }
        }
        Ok(())
    }

    /// Trainable parameters in a fixed order with stable names.
    pub fn parameters(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &s.conv.weight));
            out.push((format!("conv{}.bias", i + 1), &s.conv.bias));
            out.push((format!("bn{}.scale", i + 1), &s.bn.scale));
            out.push((format!("bn{}.shift", i + 1), &s.bn.shift));
        }
        if let Some(b) = &self.cbam {
            out.push(("cbam.cam.w0".into(), &b.cam.w0.weight));
            out.push(("cbam.cam.w1".into(), &b.cam.w1.weight));
            out.push(("cbam.sam.weight".into(), &b.sam.conv.weight));
            out.push(("cbam.sam.bias".into(), &b.sam.conv.bias));
        }
        out.push(("head.dense.weight".into(), &self.head.weight));
        if let Some(b) = &self.head.bias {
            out.push(("head.dense.bias".into(), b));
        }
        out
    }

    /// Same order and names as [`Model::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("conv{}.weight", i + 1), &mut s.conv.weight));
            out.push((format!("conv{}.bias", i + 1), &mut s.conv.bias));
            out.push((format!("bn{}.scale", i + 1), &mut s.bn.scale));
            out.push((format!("bn{}.shift", i + 1), &mut s.bn.shift));
        }
        if let Some(b) = self.cbam.as_mut() {
            out.push(("cbam.cam.w0".into(), &mut b.cam.w0.weight));
            out.push(("cbam.cam.w1".into(), &mut b.cam.w1.weight));
            out.push(("cbam.sam.weight".into(), &mut b.sam.conv.weight));
            out.push(("cbam.sam.bias".into(), &mut b.sam.conv.bias));
        }
        out.push(("head.dense.weight".into(), &mut self.head.weight));
        if let Some(b) = self.head.bias.as_mut() {
            out.push(("head.dense.bias".into(), b));
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("bn{}.running_mean", i + 1), &s.bn.running_mean));
            out.push((format!("bn{}.running_var", i + 1), &s.bn.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("bn{}.running_mean", i + 1), &mut s.bn.running_mean));
            out.push((format!("bn{}.running_var", i + 1), &mut s.bn.running_var));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.parameters_mut() {
            p.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }

    /// Hash of every discrete choice made in the last forward pass.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for ctx in &self.ctx.stages {
            ctx.relu.hash_pattern(&mut h);
            ctx.pool.hash_pattern(&mut h);
        }
        self.ctx.cbam.hash_pattern(&mut h);
        h.finish()
    }
}

/// Index of the largest entry of each batch row.
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    (0..t.shape().n)
        .map(|n| {
            let row = t.item(n);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_h: 8,
            input_w: 24,
            widths: vec![2, 3],
            pool_window: 2,
            pool_stride: 2,
            reduction: 2,
            ..ModelSpec::new(5)
        }
    }

    #[test]
    fn default_shape_chain() {
        let spec = ModelSpec::new(312);
        let shapes: Vec<Shape4> = spec
            .stage_shapes(1)
            .unwrap()
            .into_iter()
            .filter(|(name, _)| name.starts_with("conv") || name.starts_with("pool"))
            .map(|(_, s)| s)
            .collect();
        assert_eq!(
            shapes,
            vec![
                shape(1, 16, 81, 333),
                shape(1, 16, 27, 111),
                shape(1, 32, 27, 111),
                shape(1, 32, 9, 37)
            ]
        );
        assert_eq!(spec.flatten_width().unwrap(), 10656);
    }

    #[test]
    fn basic_has_no_attention_parameters() {
        let m = Model::<f32>::build(&ModelSpec::basic(10), 0).unwrap();
        assert!(m.cbam.is_none());
        assert!(m.parameters().iter().all(|(n, _)| !n.contains("cbam")));
        assert!(!m.spec().stage_shapes(1).unwrap().iter().any(|(n, _)| n == "cbam"));
    }

    #[test]
    fn parameter_names() {
        let m = Model::<f32>::build(&ModelSpec::new(20), 0).unwrap();
        let params = m.parameters();
        let w0 = params.iter().find(|(n, _)| n == "cbam.cam.w0").unwrap();
        assert_eq!(w0.1.dims(), &[2, 32]);
        let mut names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names[0], "conv1.weight");
        assert_eq!(*names.last().unwrap(), "head.dense.bias");
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(&tiny_spec(), 42).unwrap();
        let b = Model::<f32>::build(&tiny_spec(), 42).unwrap();
        let c = Model::<f32>::build(&tiny_spec(), 43).unwrap();
        let pa: Vec<_> = a.parameters().into_iter().map(|(_, p)| p.value.clone()).collect();
        let pb: Vec<_> = b.parameters().into_iter().map(|(_, p)| p.value.clone()).collect();
        let pc: Vec<_> = c.parameters().into_iter().map(|(_, p)| p.value.clone()).collect();
        assert_eq!(pa, pb);
        assert_ne!(pa, pc);
    }

    #[test]
    fn invalid_specs() {
        assert!(Model::<f32>::build(&ModelSpec::new(1), 0).is_err());
        let bad = ModelSpec {
            input_h: 8,
            ..ModelSpec::new(3)
        };
        assert!(matches!(Model::<f32>::build(&bad, 0), Err(Error::NonIntegralExtent { .. })));
    }

    #[test]
    fn forward_probabilities() {
        let spec = tiny_spec();
        let mut m = Model::<f64>::build(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(spec.input_shape(4).unwrap(), |_, _, _, _| rng.random_range(0.0..1.0));
        let p = m.forward(&x).unwrap();
        assert_eq!(p.shape(), shape(4, 5, 1, 1));
        for n in 0..4 {
            assert!((p.item(n).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let wrong = Tensor::zeros(shape(1, 1, 9, 24));
        assert!(m.forward(&wrong).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let spec = tiny_spec();
        let mut m = Model::<f32>::build(&spec, 1).unwrap();
        m.head.weight.value.fill(0.0);
        let x = Tensor::filled(spec.input_shape(2).unwrap(), 0.3);
        let p = m.forward(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn inference_rows_identical_and_pure() {
        let spec = tiny_spec();
        let mut m = Model::<f32>::build(&spec, 3).unwrap();
        m.set_training(false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = Tensor::from_fn(spec.input_shape(1).unwrap(), |_, _, _, _| rng.random_range(0.0..1.0));
        let x = Tensor::stack(&[&one, &one]).unwrap();
        let p = m.forward(&x).unwrap();
        assert_eq!(p.item(0), p.item(1));
        assert_eq!(m.forward(&x).unwrap(), p);
    }

    #[test]
    fn backward_contracts() {
        let spec = tiny_spec();
        let mut m = Model::<f64>::build(&spec, 7).unwrap();
        assert!(matches!(
            m.backward(&Tensor::zeros(shape(1, 5, 1, 1))),
            Err(Error::MissingContext(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(spec.input_shape(3).unwrap(), |_, _, _, _| rng.random_range(0.0..1.0));
        let logits = m.forward_logits(&x).unwrap();
        m.backward(&Tensor::zeros(logits.shape())).unwrap();
        assert!(m.parameters().iter().all(|(_, p)| p.grad.iter().all(|&g| g == 0.0)));

        let g = Tensor::from_fn(logits.shape(), |_, _, _, _| rng.random_range(-1.0..1.0));
        m.backward(&g).unwrap();
        let once: Vec<Vec<f64>> = m.parameters().iter().map(|(_, p)| p.grad.clone()).collect();
        m.backward(&g).unwrap();
        for ((_, p), first) in m.parameters().iter().zip(&once) {
            for (&twice, &single) in p.grad.iter().zip(first) {
                assert!((twice - 2.0 * single).abs() <= 1e-12 * single.abs().max(1.0));
            }
        }
    }
}
