//! Synthetic class-conditional images and the unlabeled calibration pool.
//!
//! Class `k` draws an oriented sinusoidal grating whose orientation is
//! `π·(k mod 5)/5` and whose frequency grows with `k / 5`, with a random phase,
//! contrast and colour mixing per sample plus additive Gaussian noise. Sample
//! `i` belongs to class `i mod classes`, so every prefix of the pool is close
//! to class-balanced. The first 80% of samples form the calibration pool, the
//! rest the labeled evaluation split.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;
use crate::vit::{stack_images, ViTConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataSpec {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
}

impl Default for ToyDataSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 500,
            seed: 7,
            image_size: 32,
            channels: 3,
            noise: 0.3,
        }
    }
}

impl ToyDataSpec {
    pub fn total(&self) -> usize {
        self.classes * self.per_class
    }

    /// Number of samples in the calibration (training) split.
    pub fn train_len(&self) -> usize {
        (self.total() * 4).div_ceil(5)
    }

    pub fn label(&self, index: usize) -> usize {
        index % self.classes
    }

    /// Image `index`; a pure function of the spec and the index.
    pub fn sample(&self, index: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let class = self.label(index);
        let theta = PI * (class % 5) as f64 / 5.0;
        let cycles = 1.0 + 1.5 * (class / 5) as f64;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let contrast = rng.gen_range(0.7..1.3);
        let offset = rng.gen_range(-0.2..0.2);
        let mix: Vec<f64> = (0..self.channels).map(|_| rng.gen_range(0.5..1.0)).collect();
        let noise = Normal::new(0.0, self.noise.max(1e-12)).expect("positive std");
        let s = self.image_size;
        let (ct, st) = (theta.cos(), theta.sin());
        let mut data = Vec::with_capacity(self.channels * s * s);
        for w in &mix {
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 - s as f64 / 2.0) * ct + (y as f64 - s as f64 / 2.0) * st;
                    let v = (2.0 * PI * cycles * u / s as f64 + phase).sin();
                    let n = if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(w * contrast * v + offset + n);
                }
            }
        }
        Tensor::new(&[self.channels, s, s], data).expect("shape matches")
    }

    fn images(&self, range: std::ops::Range<usize>) -> Vec<Tensor> {
        let idx: Vec<usize> = range.collect();
        parallel::map(&idx, |&i| self.sample(i))
    }

    /// Calibration pool and labeled evaluation split.
    pub fn generate(&self) -> ToySplit {
        let train = self.train_len();
        let eval_range = train..self.total();
        ToySplit {
            calibration: CalibrationSource::new(self.images(0..train)),
            eval: LabeledSet {
                labels: eval_range.clone().map(|i| self.label(i)).collect(),
                images: self.images(eval_range),
            },
        }
    }

    /// The training split with labels, for pretraining the full-precision model.
    pub fn teacher_set(&self) -> LabeledSet {
        let train = self.train_len();
        LabeledSet {
            images: self.images(0..train),
            labels: (0..train).map(|i| self.label(i)).collect(),
        }
    }
}

pub struct ToySplit {
    pub calibration: CalibrationSource,
    pub eval: LabeledSet,
}

/// Unlabeled images; the quantization loop sees nothing else.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationSource {
    images: Vec<Tensor>,
}

impl CalibrationSource {
    pub fn new(images: Vec<Tensor>) -> Self {
        Self { images }
    }

    pub fn synthetic(spec: &ToyDataSpec) -> Self {
        spec.generate().calibration
    }

    /// Reads `calib.bin` from a dataset directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let images = checkpoint::read_images(&dir.join(CALIB_FILE))?;
        Ok(Self { images })
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` images.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            images: self.images[..n.min(self.images.len())].to_vec(),
        }
    }

    /// First `n` images stacked into a batch.
    pub fn head_batch(&self, n: usize, config: &ViTConfig) -> Result<Tensor> {
        if self.images.is_empty() {
            return Err(Error::domain("calibration source is empty"));
        }
        stack_images(&self.images[..n.min(self.images.len())], config)
    }

    pub fn batch(&self, indices: &[usize], config: &ViTConfig) -> Result<Tensor> {
        let imgs: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        stack_images(&imgs, config)
    }

    pub fn check_shape(&self, config: &ViTConfig) -> Result<()> {
        let want = [config.channels, config.image_size, config.image_size];
        match self.images.iter().find(|i| i.shape() != want) {
            Some(bad) => Err(Error::dim(format!(
                "calibration image shape {:?} does not match model input {want:?}",
                bad.shape()
            ))),
            None => Ok(()),
        }
    }
}

/// Images with class labels, used only for evaluation and teacher pretraining.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_dir(dir: &Path) -> Result<Self> {
        checkpoint::read_labeled(&dir.join(EVAL_FILE))
    }
}

pub const CALIB_FILE: &str = "calib.bin";
pub const EVAL_FILE: &str = "eval.bin";

/// Writes `calib.bin` and `eval.bin` into `dir`.
pub fn write_dataset(dir: &Path, split: &ToySplit) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    checkpoint::write_images(&dir.join(CALIB_FILE), split.calibration.images())?;
    checkpoint::write_labeled(&dir.join(EVAL_FILE), &split.eval)?;
    Ok(())
}
