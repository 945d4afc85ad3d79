//! Datasets: on-disk MNIST/CIFAR-10 readers, a synthetic generator and
//! client sharding.

mod cifar;
mod idx;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub use cifar::parse_cifar10_bin;
pub use idx::{encode_idx_images, encode_idx_labels, parse_idx, IdxData};
pub use synth::{synth_dataset, synth_train_test};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic number {0:#010x}")]
    BadMagic(u32),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("label {0} out of range")]
    LabelOutOfRange(u8),
    #[error("byte length {0} is not a multiple of the 3073-byte CIFAR-10 record")]
    RecordLength(usize),
    #[error("cannot split {n} samples across {k} clients")]
    TooManyClients { n: usize, k: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Images in `[0, 1]` with shape `[n, c, h, w]` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if images.ndim() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= {num_classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn empty(image_shape: [usize; 3], num_classes: usize) -> Self {
        let [c, h, w] = image_shape;
        Self {
            images: Tensor::zeros(vec![0, c, h, w]),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let n = self.image_len();
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![1, c, h, w], self.images.data()[i * n..(i + 1) * n].to_vec())
            .expect("consistent image slice")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.image_len();
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        Self {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent subset"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Flattened `[b, c*h*w]` batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sub = self.subset(indices);
        let n = self.image_len();
        let flat = sub
            .images
            .reshape(vec![indices.len(), n])
            .expect("consistent batch");
        (flat, sub.labels)
    }
}

/// Shuffles with `seed`, then cuts `k` contiguous shards. The first
/// `n mod k` shards hold one extra sample.
pub fn split_clients(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Dataset>, DataError> {
    let n = dataset.len();
    if k == 0 || k > n {
        return Err(DataError::TooManyClients { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        shards.push(dataset.subset(&order[start..start + size]));
        start += size;
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(n: usize) -> Dataset {
        // Pixel value encodes the sample index so shards can be traced back.
        let data = (0..n).map(|i| i as f64 / n as f64).collect();
        Dataset::new(Tensor::new(vec![n, 1, 1, 1], data).unwrap(), vec![0; n], 1).unwrap()
    }

    fn ids(d: &Dataset) -> Vec<usize> {
        d.images.data().iter().map(|v| (v * 10.0).round() as usize).collect()
    }

    #[test]
    fn even_split() {
        let shards = split_clients(&numbered(10), 2, 1).unwrap();
        assert_eq!(shards.iter().map(Dataset::len).collect::<Vec<_>>(), vec![5, 5]);
    }

    #[test]
    fn remainder_goes_to_first_shards() {
        let shards = split_clients(&numbered(10), 3, 1).unwrap();
        assert_eq!(shards.iter().map(Dataset::len).collect::<Vec<_>>(), vec![4, 3, 3]);
    }

    #[test]
    fn single_client_keeps_everything() {
        let d = numbered(10);
        let shards = split_clients(&d, 1, 7).unwrap();
        let mut got = ids(&shards[0]);
        got.sort_unstable();
        assert_eq!(got, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_clients() {
        assert!(matches!(
            split_clients(&numbered(3), 4, 0),
            Err(DataError::TooManyClients { n: 3, k: 4 })
        ));
    }

    #[test]
    fn shards_partition_the_input() {
        let shards = split_clients(&numbered(10), 4, 3).unwrap();
        let mut all: Vec<usize> = shards.iter().flat_map(ids).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
