//! Datasets of labelled grayscale images: directory loading, batching, and a
//! synthetic generator.
//!
//! On disk a dataset is `root/<class_name>/<image>`, where each image is a
//! binary PGM (`.pgm`) or a raw tensor (`.vten`). Classes are indexed by
//! sorted directory name.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{INPUT_HEIGHT, INPUT_WIDTH};
use crate::rng::{derive_seed, stream_rng, STREAM_SHUFFLE};
use crate::tensor::{Shape4, Tensor};

pub mod image;
pub mod synth;

pub use image::{load_pgm, read_vten, resize_bilinear, vten_image, write_pgm, write_vten, Image, Pgm};
pub use synth::{generate_synthetic, write_dataset, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 1, h, w)` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    provenance: Provenance,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, provenance: Provenance) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Dataset("dataset has no images".into()))?;
        let (height, width) = (first.image.shape().h, first.image.shape().w);
        let expected = Shape4::new(1, 1, height, width)?;
        let mut counts = vec![0usize; class_names.len()];
        for s in &samples {
            if s.image.shape() != expected {
                return Err(Error::Dataset(format!(
                    "{}: image shape {:?}, expected {:?}",
                    s.source,
                    s.image.shape(),
                    expected
                )));
            }
            if s.label >= class_names.len() {
                return Err(Error::Label {
                    label: s.label,
                    classes: class_names.len(),
                });
            }
            if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("{}: pixels outside [0,1]", s.source)));
            }
            counts[s.label] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Dataset(format!("class {} has no images", class_names[c])));
        }
        let mut sorted = class_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != class_names.len() {
            return Err(Error::Dataset("class names are not unique".into()));
        }
        Ok(Dataset {
            samples,
            class_names,
            provenance,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// `(height, width)` shared by every image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sample indices of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }

    /// Stacks the chosen samples into one `(b, 1, h, w)` batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("sample index {i} out of range")))?;
            images.push(&s.image);
            labels.push(s.label);
        }
        Ok((Tensor::stack(&images)?, labels))
    }
}

/// Loads a class-per-directory tree, resizing every image to the network
/// input size.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load_dataset_sized(root, INPUT_HEIGHT, INPUT_WIDTH)
}

pub fn load_dataset_sized(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    let mut classes: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::Dataset(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            (!name.starts_with('.')).then(|| (name, e.path()))
        })
        .collect();
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::Dataset(format!(
            "{}: found {} class directories, need at least 2",
            root.display(),
            classes.len()
        )));
    }

    let mut files = Vec::new();
    for (label, (name, dir)) in classes.iter().enumerate() {
        let mut images: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && image_kind(p).is_some())
            .collect();
        images.sort();
        if images.is_empty() {
            return Err(Error::Dataset(format!("class {name} has no images")));
        }
        files.extend(images.into_iter().map(|p| (label, p)));
    }

    let samples = files
        .par_iter()
        .map(|(label, path)| {
            let image = read_image(path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            let image = resize_bilinear(&image, height, width)?;
            Ok(Sample {
                image: Tensor::from_vec(Shape4::new(1, 1, height, width)?, image.data)?,
                label: *label,
                source: path.display().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        samples,
        classes.into_iter().map(|(n, _)| n).collect(),
        Provenance::Real,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ImageKind {
    Pgm,
    Vten,
}

fn image_kind(path: &Path) -> Option<ImageKind> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "pgm" => Some(ImageKind::Pgm),
        "vten" => Some(ImageKind::Vten),
        _ => None,
    }
}

/// Reads one `.pgm` or `.vten` file as a `[0,1]` image at its native size.
pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    match image_kind(path) {
        Some(ImageKind::Pgm) => Ok(load_pgm(&bytes)?.to_unit()),
        Some(ImageKind::Vten) => {
            let (dims, data) = read_vten(&bytes)?;
            vten_image(&dims, data)
        }
        None => Err(Error::Format(format!(
            "{}: unsupported image type (expected .pgm or .vten)",
            path.display()
        ))),
    }
}

/// Shuffles `indices` with a generator keyed on `(seed, epoch)` and cuts the
/// result into batches; the last batch may be short.
pub fn batch_order(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut stream_rng(derive_seed(seed, STREAM_SHUFFLE), epoch as u64));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Shuffled batches of `(images, labels)` for one epoch.
pub fn batches<'a>(
    ds: &'a Dataset,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Result<(Tensor<f32>, Vec<usize>)>> + 'a> {
    let order = batch_order(indices, batch_size, seed, epoch)?;
    Ok(order.into_iter().map(move |b| ds.gather(&b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(label: usize, v: f32) -> Sample {
        Sample {
            image: Tensor::filled(Shape4::new(1, 1, 2, 3).unwrap(), v),
            label,
            source: format!("s{label}"),
        }
    }

    #[test]
    fn batch_sizes() {
        let idx: Vec<usize> = (0..100).collect();
        let sizes: Vec<usize> = batch_order(&idx, 36, 1, 0).unwrap().iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![36, 36, 28]);
        let singles = batch_order(&idx, 1, 1, 0).unwrap();
        assert_eq!(singles.len(), 100);
        let mut flat: Vec<usize> = singles.concat();
        assert_ne!(flat, idx);
        flat.sort();
        assert_eq!(flat, idx);
        assert!(batch_order(&idx, 0, 1, 0).is_err());
    }

    #[test]
    fn batch_order_deterministic() {
        let idx: Vec<usize> = (0..50).collect();
        assert_eq!(batch_order(&idx, 8, 3, 2).unwrap(), batch_order(&idx, 8, 3, 2).unwrap());
        assert_ne!(batch_order(&idx, 8, 3, 2).unwrap(), batch_order(&idx, 8, 3, 3).unwrap());
    }

    #[test]
    fn dataset_validation() {
        let names = vec!["a".to_string(), "b".to_string()];
        let ds = Dataset::new(vec![sample(0, 0.1), sample(1, 0.9)], names.clone(), Provenance::Synthetic).unwrap();
        assert_eq!(ds.image_size(), (2, 3));
        let (x, labels) = ds.gather(&[1, 0, 1]).unwrap();
        assert_eq!(x.shape(), Shape4::new(3, 1, 2, 3).unwrap());
        assert_eq!(labels, vec![1, 0, 1]);
        assert!(Dataset::new(vec![sample(0, 0.1)], names.clone(), Provenance::Real).is_err());
        assert!(Dataset::new(vec![sample(0, 0.1), sample(2, 0.1)], names.clone(), Provenance::Real).is_err());
        assert!(Dataset::new(vec![sample(0, 1.5), sample(1, 0.1)], names, Provenance::Real).is_err());
    }
}
