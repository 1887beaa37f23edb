//! Data ingestion: CIFAR binary readers, a synthetic separable dataset, and
//! deterministic mini-batching.

use crate::error::{CoreError, Result};
use crate::tensor::{DenseTensor, Rng};
use std::fs::File;
use std::io::Read;
use std::path::Path;

const CIFAR_W: usize = 32;
const CIFAR_H: usize = 32;
const CIFAR_C: usize = 3;
const CIFAR_PIXELS: usize = CIFAR_C * CIFAR_H * CIFAR_W; // 3072

/// Images plus labels, normalized to per-channel zero mean / unit variance
/// using statistics computed once from the train split.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: DenseTensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn sample_len(&self) -> usize {
        let (c, h, w) = self.geometry();
        c * h * w
    }

    /// Copy the given rows into a batch.
    pub fn gather(&self, indices: &[usize]) -> LabeledBatch {
        let (c, h, w) = self.geometry();
        let sl = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * sl);
        let src = self.images.data();
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * sl..(i + 1) * sl]);
            labels.push(self.labels[i]);
        }
        LabeledBatch {
            images: DenseTensor::new(vec![indices.len(), c, h, w], data)
                .expect("gather shape is consistent"),
            labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: DenseTensor,
    pub labels: Vec<usize>,
}

// ---------------------------------------------------------------------------
// CIFAR binary format
// ---------------------------------------------------------------------------

/// One raw CIFAR record: label byte(s) then 3072 channel-planar pixel bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

/// Parse a CIFAR binary file of fixed-size records. `label_bytes` is 1 for
/// CIFAR-10 and 2 for CIFAR-100 (coarse then fine; the fine label is kept).
pub fn read_cifar_records(path: &Path, label_bytes: usize) -> Result<Vec<CifarRecord>> {
    let record_len = label_bytes + CIFAR_PIXELS;
    let mut file = File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    if buf.len() % record_len != 0 {
        return Err(CoreError::Ingest {
            offset: (buf.len() / record_len * record_len) as u64,
            msg: format!(
                "{} has {} bytes, not a multiple of the {}-byte record",
                path.display(),
                buf.len(),
                record_len
            ),
        });
    }
    let mut out = Vec::with_capacity(buf.len() / record_len);
    for (i, rec) in buf.chunks_exact(record_len).enumerate() {
        let label = rec[label_bytes - 1]; // fine label for CIFAR-100
        if label_bytes == 1 && label > 9 {
            return Err(CoreError::Ingest {
                offset: (i * record_len) as u64,
                msg: format!("label byte {label} out of range [0, 9]"),
            });
        }
        out.push(CifarRecord {
            label,
            pixels: rec[label_bytes..].to_vec(),
        });
    }
    Ok(out)
}

fn records_to_raw(records: &[CifarRecord], num_classes: usize) -> Dataset {
    let n = records.len();
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in records {
        labels.push(r.label as usize);
        data.extend(r.pixels.iter().map(|&b| b as f32 / 255.0));
    }
    Dataset {
        images: DenseTensor::new(vec![n, CIFAR_C, CIFAR_H, CIFAR_W], data)
            .expect("records have fixed geometry"),
        labels,
        num_classes,
    }
}

/// Load the standard CIFAR-10 directory (`data_batch_1..5.bin`,
/// `test_batch.bin`): 50000 train and 10000 test records, normalized with
/// train-split statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_records = Vec::new();
    for i in 1..=5 {
        train_records.extend(read_cifar_records(&dir.join(format!("data_batch_{i}.bin")), 1)?);
    }
    let test_records = read_cifar_records(&dir.join("test_batch.bin"), 1)?;
    let mut train = records_to_raw(&train_records, 10);
    let mut test = records_to_raw(&test_records, 10);
    normalize_pair(&mut train, &mut test);
    Ok((train, test))
}

/// Compute per-channel mean/std from the train split and apply them to both
/// splits (test never contributes statistics).
pub fn normalize_pair(train: &mut Dataset, test: &mut Dataset) {
    let (c, h, w) = train.geometry();
    let plane = h * w;
    let n = train.len();
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    {
        let data = train.images.data();
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * plane;
                for &v in &data[base..base + plane] {
                    mean[ci] += v as f64;
                }
            }
        }
        for m in &mut mean {
            *m /= (n * plane) as f64;
        }
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * plane;
                for &v in &data[base..base + plane] {
                    let d = v as f64 - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in &mut var {
            *v = (*v / (n * plane) as f64).sqrt().max(1e-8);
        }
    }
    for ds in [train, test] {
        let (c2, h2, w2) = ds.geometry();
        debug_assert_eq!((c, h, w), (c2, h2, w2));
        let count = ds.len();
        let data = ds.images.data_mut();
        for s in 0..count {
            for ci in 0..c {
                let base = (s * c + ci) * plane;
                for v in &mut data[base..base + plane] {
                    *v = ((*v as f64 - mean[ci]) / var[ci]) as f32;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// Class-conditional Gaussian blobs: each class gets a random prototype
/// image and samples scatter around it with small noise, so the classes are
/// linearly separable by a wide margin. Deterministic per seed; labels are
/// assigned round-robin.
pub fn synth_patches(
    seed: u64,
    n: usize,
    classes: usize,
    geometry: (usize, usize, usize),
) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(CoreError::InvalidArgument(format!(
            "need n >= classes >= 1, got n={n} classes={classes}"
        )));
    }
    let (c, h, w) = geometry;
    let dim = c * h * w;
    let mut rng = Rng::new(seed);
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.normal() as f32).collect())
        .collect();
    const NOISE: f32 = 0.3;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let proto = &prototypes[class];
        data.extend(proto.iter().map(|&p| p + NOISE * rng.normal() as f32));
    }
    Ok(Dataset {
        images: DenseTensor::new(vec![n, c, h, w], data)?,
        labels,
        num_classes: classes,
    })
}

/// Deterministic head/tail split preserving order (labels are round-robin,
/// so both parts stay class-balanced).
pub fn train_test_split(ds: &Dataset, train_fraction: f64) -> (Dataset, Dataset) {
    let n_train = ((ds.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, ds.len().saturating_sub(1).max(1));
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..ds.len()).collect();
    let (c, h, w) = ds.geometry();
    let make = |idx: &[usize]| {
        let b = ds.gather(idx);
        Dataset {
            images: b
                .images
                .reshape(&[idx.len().max(1), c, h, w])
                .expect("gather preserves geometry"),
            labels: b.labels,
            num_classes: ds.num_classes,
        }
    };
    (make(&train_idx), make(&test_idx))
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Shuffle order for one epoch, a pure function of (seed, epoch).
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed).derive(0x5u64.wrapping_add(epoch));
    rng.shuffle(&mut indices);
    indices
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        // Drop-last: a partial tail batch is never yielded.
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        Some(self.dataset.gather(idx))
    }
}

/// Seeded shuffled mini-batches for one epoch; the last partial batch is
/// dropped so every batch has constant shape.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    if dataset.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
    }
    Ok(BatchIter {
        dataset,
        order: shuffled_indices(dataset.len(), seed, epoch),
        batch_size,
        cursor: 0,
    })
}

/// Sequential full-coverage batches (including the tail) for evaluation.
pub fn eval_batches(dataset: &Dataset, batch_size: usize) -> impl Iterator<Item = LabeledBatch> + '_ {
    let n = dataset.len();
    let bs = batch_size.max(1);
    (0..n.div_ceil(bs)).map(move |i| {
        let lo = i * bs;
        let hi = ((i + 1) * bs).min(n);
        let idx: Vec<usize> = (lo..hi).collect();
        dataset.gather(&idx)
    })
}
