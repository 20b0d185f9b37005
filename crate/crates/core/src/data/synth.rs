//! Synthetic vein-like images. Each class gets a template of a few smooth,
//! dark, mostly horizontal curves on a bright background; each image of the
//! class redraws the template with a small translation and pixel noise.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{write_pgm, Dataset, Image, Provenance, Sample};
use crate::error::{Error, Result};
use crate::model::{INPUT_HEIGHT, INPUT_WIDTH};
use crate::rng::{derive_seed, stream_rng, STREAM_SYNTH};
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of curves per class template.
    pub veins: (usize, usize),
    /// Range of the Gaussian cross-section width of a curve, in pixels.
    pub thickness: (f32, f32),
    /// Standard deviation of additive per-pixel noise.
    pub noise: f32,
    /// Maximum translation in pixels along each axis.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 20,
            images_per_class: 12,
            height: INPUT_HEIGHT,
            width: INPUT_WIDTH,
            veins: (3, 8),
            thickness: (2.0, 4.0),
            noise: 0.04,
            jitter: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid("synthetic data needs at least 2 classes".into()));
        }
        if self.images_per_class < 2 {
            return Err(Error::Invalid(
                "synthetic data needs at least 2 images per class for a train/test split".into(),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Invalid("synthetic images must be at least 8x8".into()));
        }
        if self.veins.0 == 0 || self.veins.0 > self.veins.1 {
            return Err(Error::Invalid("bad vein count range".into()));
        }
        let (t0, t1) = self.thickness;
        if !(t0 > 0.0 && t0 <= t1 && t1.is_finite()) {
            return Err(Error::Invalid("bad thickness range".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Invalid("noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Vein {
    x0: f32,
    x1: f32,
    y0: f32,
    tilt: f32,
    waves: [(f32, f32, f32); 2],
    sigma: f32,
    depth: f32,
}

impl Vein {
    fn random<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let (h, w) = (cfg.height as f32, cfg.width as f32);
        let wave = |rng: &mut R, amp: (f32, f32), period: (f32, f32)| {
            (
                rng.random_range(amp.0..=amp.1),
                std::f32::consts::TAU / rng.random_range(period.0..=period.1),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        };
        Vein {
            x0: rng.random_range(0.0..=0.35 * w),
            x1: rng.random_range(0.65 * w..=w),
            y0: rng.random_range(0.15 * h..=0.85 * h),
            tilt: rng.random_range(-0.25 * h..=0.25 * h) / w,
            waves: [
                wave(rng, (1.0, 0.12 * h), (0.4 * w, 1.5 * w)),
                wave(rng, (0.3, 2.5), (0.08 * w, 0.25 * w)),
            ],
            sigma: rng.random_range(cfg.thickness.0..=cfg.thickness.1),
            depth: rng.random_range(0.25..=0.5),
        }
    }

    fn centre(&self, x: f32) -> f32 {
        let mut y = self.y0 + self.tilt * (x - self.x0);
        for &(a, k, phi) in &self.waves {
            y += a * (k * x + phi).sin();
        }
        y
    }
}

fn render<R: Rng>(cfg: &SynthConfig, veins: &[Vein], rng: &mut R) -> Result<Image> {
    let (h, w) = (cfg.height, cfg.width);
    let j = cfg.jitter as i64;
    let dx = rng.random_range(-j..=j) as f32;
    let dy = rng.random_range(-j..=j) as f32;
    let mut img = Image::filled(h, w, 0.0);
    for r in 0..h {
        let v = 0.72 + 0.18 * (std::f32::consts::PI * (r as f32 + 0.5) / h as f32).sin();
        img.data[r * w..(r + 1) * w].fill(v);
    }
    for vein in veins {
        let reach = 4.0 * vein.sigma;
        for c in 0..w {
            let x = c as f32 - dx;
            if x < vein.x0 || x > vein.x1 {
                continue;
            }
            let yc = vein.centre(x) + dy;
            let lo = (yc - reach).floor().max(0.0) as usize;
            let hi = ((yc + reach).ceil().max(0.0) as usize).min(h - 1);
            for r in lo..=hi {
                let d = (r as f32 - yc) / vein.sigma;
                img.data[r * w + c] -= vein.depth * (-0.5 * d * d).exp();
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in img.data.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in img.data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok(img)
}

/// Builds a synthetic dataset; identical configurations give bitwise
/// identical datasets. Fails if images of the same class are not, on
/// average, closer to each other than to images of other classes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let base = derive_seed(cfg.seed, STREAM_SYNTH);
    let digits = cfg.num_classes.to_string().len().max(3);
    let shape = Shape4::new(1, 1, cfg.height, cfg.width)?;
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.images_per_class);
    let mut names = Vec::with_capacity(cfg.num_classes);
    for class in 0..cfg.num_classes {
        let class_seed = derive_seed(base, class as u64);
        let mut rng = stream_rng(class_seed, 0);
        let count = rng.random_range(cfg.veins.0..=cfg.veins.1);
        let veins: Vec<Vein> = (0..count).map(|_| Vein::random(cfg, &mut rng)).collect();
        let name = format!("c{class:0digits$}");
        for i in 0..cfg.images_per_class {
            let mut rng = stream_rng(class_seed, 1 + i as u64);
            let img = render(cfg, &veins, &mut rng)?;
            samples.push(Sample {
                image: Tensor::from_vec(shape, img.data)?,
                label: class,
                source: format!("synthetic/{name}/{i:03}"),
            });
        }
        names.push(name);
    }
    let ds = Dataset::new(samples, names, Provenance::Synthetic)?;
    let margin = class_margin(&ds);
    if !(margin > 0.0) {
        return Err(Error::Dataset(format!(
            "synthetic classes are not separable (inter-minus-intra distance {margin:.4})"
        )));
    }
    Ok(ds)
}

/// Mean inter-class minus mean intra-class Euclidean distance between raw
/// images, over at most 20 classes and 6 images per class.
pub fn class_margin(ds: &Dataset) -> f64 {
    let picked: Vec<(usize, &[f32])> = ds
        .indices_by_class()
        .iter()
        .take(20)
        .flat_map(|idx| idx.iter().take(6))
        .map(|&i| (ds.samples()[i].label, ds.samples()[i].image.data()))
        .collect();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for (a, (la, xa)) in picked.iter().enumerate() {
        for (lb, xb) in &picked[a + 1..] {
            let d: f64 = xa
                .iter()
                .zip(xb.iter())
                .map(|(&p, &q)| ((p - q) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let acc = if la == lb { &mut intra } else { &mut inter };
            acc.0 += d;
            acc.1 += 1;
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return f64::NAN;
    }
    inter.0 / inter.1 as f64 - intra.0 / intra.1 as f64
}

/// Writes a dataset as `dir/<class>/<nnn>.pgm`, quantized to 8 bits.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<usize> {
    let (h, w) = ds.image_size();
    let by_class = ds.indices_by_class();
    let mut written = 0;
    for (class, indices) in by_class.iter().enumerate() {
        let class_dir = dir.join(&ds.class_names()[class]);
        fs::create_dir_all(&class_dir)?;
        for (k, &i) in indices.iter().enumerate() {
            let img = Image::new(h, w, ds.samples()[i].image.data().to_vec())?;
            let file = BufWriter::new(File::create(class_dir.join(format!("{k:03}.pgm")))?);
            write_pgm(&img.to_pgm(), file)?;
            written += 1;
        }
    }
    Ok(written)
}
