//! Loss, optimizer, metrics and the epoch loop.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Model, ModelSpec};
use crate::ops::{softmax, Param};
use crate::rng::{stream_rng, STREAM_SPLIT};
use crate::tensor::{Real, Shape4, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const LOG_FLOOR: f64 = 1e-12;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,seconds";

/// Mean negative log-likelihood of `labels` under `probs` and its gradient
/// with respect to the pre-softmax logits, `(probs - onehot) / n`.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let s = probs.shape();
    if labels.len() != s.n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let classes = s.item();
    let inv_n = T::of(1.0 / s.n as f64);
    let mut grad = probs.scale(inv_n);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label { label, classes });
        }
        let p = probs.data()[i * classes + label].as_f64();
        loss -= p.max(LOG_FLOOR).ln();
        grad.data_mut()[i * classes + label] -= inv_n;
    }
    Ok((loss / s.n as f64, grad))
}

/// Fraction of positions where prediction and label agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "accuracy needs equal, non-empty lists (got {} and {})",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Adam with bias-corrected moments. Moments are allocated on the first step.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// The parameter list must be the same, in the same order, on every call.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step = T::of(self.learning_rate / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = tb1 * *m + ob1 * *g;
                *v = tb2 * *v + ob2 * *g * *g;
                *w -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub reduction: usize,
    pub use_cbam: bool,
    /// When false the `seconds` column is written as 0 so that metric files
    /// from identical runs compare equal byte for byte.
    pub record_seconds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 36,
            epochs: 20,
            train_fraction: 0.7,
            seed: 0,
            reduction: crate::attention::DEFAULT_REDUCTION,
            use_cbam: true,
            record_seconds: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "train fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning rate must be finite and non-negative".into()));
        }
        if self.reduction == 0 {
            return Err(Error::Invalid("reduction must be at least 1".into()));
        }
        Ok(())
    }

    /// The network this configuration trains, for images of the given size.
    pub fn model_spec(&self, num_classes: usize, image_size: (usize, usize)) -> ModelSpec {
        ModelSpec {
            input_h: image_size.0,
            input_w: image_size.1,
            use_cbam: self.use_cbam,
            reduction: self.reduction,
            ..ModelSpec::new(num_classes)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Number of training images taken from a class of `k`: `ceil(fraction*k)`,
/// kept within `1..k` so both sides of the split see every class.
pub fn train_count(k: usize, fraction: f64) -> usize {
    ((fraction * k as f64).ceil() as usize).clamp(1, k.saturating_sub(1).max(1))
}

/// Per-class random split; both halves are sorted.
pub fn stratified_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("train fraction {fraction} not in (0,1)")));
    }
    let mut rng = stream_rng(seed, STREAM_SPLIT);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in ds.indices_by_class().into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Dataset(format!(
                "class {} has {} image(s); at least 2 are needed to split",
                ds.class_names()[class],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let cut = train_count(idx.len(), fraction);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.seconds
        )
    }
}

/// Writes the metrics header, then one row per epoch.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.out, "{}", m.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub accuracy: f64,
    /// Misclassified test images per true class.
    pub errors_per_class: Vec<usize>,
}

/// Inference-mode predictions over `indices`, in order. The model is left in
/// inference mode.
pub fn evaluate(model: &mut Model<f32>, ds: &Dataset, indices: &[usize], batch_size: usize) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    model.set_training(false);
    let mut predictions = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = ds.gather(chunk)?;
        predictions.extend(model.predict(&x)?);
        labels.extend(y);
    }
    let mut errors_per_class = vec![0; ds.num_classes()];
    for (&p, &l) in predictions.iter().zip(&labels) {
        if p != l {
            errors_per_class[l] += 1;
        }
    }
    Ok(Evaluation {
        accuracy: accuracy(&predictions, &labels)?,
        predictions,
        labels,
        errors_per_class,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub split: Split,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    /// 1-based epoch of the first best test accuracy.
    pub best_epoch: usize,
}

/// Trains `model` on the seed-derived split of `ds`, calling `on_epoch` after
/// every epoch. Training accuracy comes from the training-mode forward pass
/// of each batch; test accuracy from an inference-mode pass after the epoch.
pub fn train_loop(
    model: &mut Model<f32>,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (h, w) = ds.image_size();
    let expected = model.spec().input_shape(1)?;
    if expected != Shape4::new(1, 1, h, w)? {
        return Err(Error::ShapeMismatch {
            expected,
            actual: Shape4::new(1, 1, h, w)?,
        });
    }
    if model.num_classes() != ds.num_classes() {
        return Err(Error::Dataset(format!(
            "model predicts {} classes, dataset has {}",
            model.num_classes(),
            ds.num_classes()
        )));
    }
    let split = stratified_split(ds, cfg.train_fraction, cfg.seed)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        model.set_training(true);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for batch in batches(ds, &split.train, cfg.batch_size, cfg.seed, epoch)? {
            let (x, labels) = batch?;
            let probs = softmax(&model.forward_logits(&x)?);
            let (loss, grad) = cross_entropy(&probs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            model.backward(&grad)?;
            let mut params: Vec<&mut Param<f32>> = model.parameters_mut().into_iter().map(|(_, p)| p).collect();
            adam.step(&mut params);
            loss_sum += loss * labels.len() as f64;
            hits += argmax_rows(&probs).iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
        }
        let test = evaluate(model, ds, &split.test, cfg.batch_size)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: hits as f64 / seen as f64,
            test_acc: test.accuracy,
            seconds: if cfg.record_seconds {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&m)?;
        metrics.push(m);
    }
    let (best_epoch, best_test_acc) = metrics
        .iter()
        .fold((0, f64::NEG_INFINITY), |(be, ba), m| {
            if m.test_acc > ba {
                (m.epoch, m.test_acc)
            } else {
                (be, ba)
            }
        });
    Ok(TrainReport {
        final_test_acc: metrics.last().map_or(f64::NAN, |m| m.test_acc),
        best_test_acc,
        best_epoch,
        metrics,
        split,
    })
}
