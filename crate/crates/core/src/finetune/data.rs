//! Seeded synthetic image classification task.
//!
//! Each class has a prototype made of a few Gaussian blobs. A sample is its
//! class prototype shifted by a couple of pixels, rescaled, offset by a
//! constant and covered in Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model_io::{TensorRecord, TensorStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToyTask {
    pub seed: u64,
    pub classes: usize,
    /// Images are `1 x size x size`.
    pub size: usize,
    pub train: usize,
    pub test: usize,
    /// Leading training samples reused for calibration.
    pub calibration: usize,
    pub noise: f32,
    pub max_shift: usize,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self { seed: 7, classes: 10, size: 16, train: 16000, test: 1000, calibration: 256, noise: 0.45, max_shift: 2 }
    }
}

/// Images `[n, 1, size, size]` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub task: ToyTask,
    pub train: Dataset,
    pub test: Dataset,
}

impl ToyTask {
    fn prototypes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        let s = self.size;
        (0..self.classes)
            .map(|_| {
                let mut img = vec![0.0f32; s * s];
                for _ in 0..3 {
                    let cy = rng.random_range(0.2..0.8) * s as f32;
                    let cx = rng.random_range(0.2..0.8) * s as f32;
                    let sigma = rng.random_range(0.08..0.2) * s as f32;
                    let amp = rng.random_range(0.6..1.2) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                    for y in 0..s {
                        for x in 0..s {
                            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                            img[y * s + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
                img
            })
            .collect()
    }

    fn sample(&self, proto: &[f32], rng: &mut ChaCha8Rng, out: &mut [f32]) {
        let s = self.size as isize;
        let m = self.max_shift as isize;
        let dy = rng.random_range(-m as i64..=m as i64) as isize;
        let dx = rng.random_range(-m as i64..=m as i64) as isize;
        let gain: f32 = rng.random_range(0.7..1.3);
        let offset: f32 = rng.random_range(0.5..1.5);
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = (y - dy, x - dx);
                let v = if (0..s).contains(&sy) && (0..s).contains(&sx) { proto[(sy * s + sx) as usize] } else { 0.0 };
                let n: f32 = rng.sample(StandardNormal);
                out[(y * s + x) as usize] = gain * v + offset + self.noise * n;
            }
        }
    }

    fn dataset(&self, protos: &[Vec<f32>], n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let len = self.size * self.size;
        let mut data = vec![0.0f32; n * len];
        let mut labels = Vec::with_capacity(n);
        for (i, img) in data.chunks_mut(len).enumerate() {
            let label = i % self.classes;
            self.sample(&protos[label], rng, img);
            labels.push(label);
        }
        Dataset { images: Tensor { shape: vec![n, 1, self.size, self.size], data }, labels }
    }

    /// Bit-identical for a fixed task description.
    pub fn generate(&self) -> Result<ToyData> {
        if self.classes < 2 || self.size < 4 || self.train == 0 || self.test == 0 {
            return Err(Error::Config("toy task needs >= 2 classes, size >= 4 and non-empty splits".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let protos = self.prototypes(&mut rng);
        rng.set_stream(1);
        let train = self.dataset(&protos, self.train, &mut rng);
        rng.set_stream(2);
        let test = self.dataset(&protos, self.test, &mut rng);
        Ok(ToyData { task: *self, train, test })
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let item = self.images.item_len();
        let mut data = Vec::with_capacity(idx.len() * item);
        for &i in idx {
            data.extend_from_slice(self.images.item(i));
        }
        let mut shape = self.images.shape.clone();
        shape[0] = idx.len();
        (Tensor { shape, data }, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Consecutive batches in storage order (the last may be short).
    pub fn batches(&self, batch_size: usize) -> Vec<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }

    /// Batches over a given permutation of the samples.
    pub fn batches_in(&self, order: &[usize], batch_size: usize) -> Vec<(Tensor, Vec<usize>)> {
        order.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Dataset { images, labels }
    }

    /// Store as batch records `input.<i>` (f32) and `label.<i>` (u8).
    pub fn to_store(&self, batch_size: usize) -> Result<TensorStore> {
        let mut records = Vec::new();
        for (i, (x, y)) in self.batches(batch_size).into_iter().enumerate() {
            if y.iter().any(|&l| l > u8::MAX as usize) {
                return Err(Error::Config("labels must fit in a byte".into()));
            }
            records.push(TensorRecord::from_tensor(format!("input.{i}"), &x));
            let labels: Vec<u8> = y.iter().map(|&l| l as u8).collect();
            records.push(TensorRecord::from_u8(format!("label.{i}"), &[labels.len()], &labels));
        }
        TensorStore::from_records(records)
    }
}

/// Read `input.<i>` batches (and `label.<i>` when present) from a store, in
/// index order until the first missing input.
pub fn load_batches(store: &TensorStore) -> Result<Vec<(Tensor, Option<Vec<usize>>)>> {
    let mut out = Vec::new();
    for i in 0.. {
        let Some(x) = store.get(&format!("input.{i}")) else { break };
        let x = x.to_tensor()?;
        let y = match store.get(&format!("label.{i}")) {
            Some(r) => {
                let y: Vec<usize> = r.to_u8()?.into_iter().map(usize::from).collect();
                if y.len() != x.batch() {
                    return Err(Error::InvalidRecord {
                        record: format!("label.{i}"),
                        detail: format!("{} labels for a batch of {}", y.len(), x.batch()),
                    });
                }
                Some(y)
            }
            None => None,
        };
        out.push((x, y));
    }
    if out.is_empty() {
        return Err(Error::Empty("data container (no `input.0` record)"));
    }
    Ok(out)
}

/// Merge labelled batches back into one dataset.
pub fn dataset_from_batches(batches: &[(Tensor, Vec<usize>)]) -> Result<Dataset> {
    let images = Tensor::concat(&batches.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>())?;
    let labels = batches.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    Ok(Dataset { images, labels })
}
