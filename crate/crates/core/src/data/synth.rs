//! Synthetic image classification data.
//!
//! Each class owns a smooth prototype built from a few 2-D Gaussian bumps;
//! samples are the prototype plus small pixel noise and a brightness jitter,
//! clamped to `[0, 1]`. Labels cycle through the classes so any prefix is
//! close to balanced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::tensor::Tensor;

const BUMPS: usize = 3;
const PIXEL_NOISE: f64 = 0.05;
const BACKGROUND: f64 = 0.1;

fn prototypes(rng: &mut ChaCha8Rng, shape: [usize; 3], classes: usize) -> Vec<Vec<f64>> {
    let [c, h, w] = shape;
    let side = h.min(w) as f64;
    (0..classes)
        .map(|_| {
            let mut img = vec![BACKGROUND; c * h * w];
            for _ in 0..BUMPS {
                let cy = rng.gen_range(0.0..h as f64);
                let cx = rng.gen_range(0.0..w as f64);
                let radius = rng.gen_range(0.15..0.35) * side;
                let amp: Vec<f64> = (0..c).map(|_| rng.gen_range(0.4..0.9)).collect();
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(ch * h + y) * w + x] += amp[ch] * (-d2 / (2.0 * radius * radius)).exp();
                        }
                    }
                }
            }
            img.iter().map(|v| v.clamp(0.0, 1.0)).collect()
        })
        .collect()
}

/// `n` samples of `shape = [c, h, w]` images over `num_classes` classes.
pub fn synth_dataset(seed: u64, n: usize, shape: [usize; 3], num_classes: usize) -> Dataset {
    let [c, h, w] = shape;
    let classes = num_classes.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(&mut rng, shape, classes);
    let len = c * h * w;
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let gain: f64 = rng.gen_range(0.85..1.15);
        data.extend(protos[label].iter().map(|&p| {
            let noise: f64 = rng.sample(StandardNormal);
            (p * gain + PIXEL_NOISE * noise).clamp(0.0, 1.0)
        }));
        labels.push(label);
    }
    Dataset {
        images: Tensor::new(vec![n, c, h, w], data).expect("consistent synthetic shape"),
        labels,
        num_classes: classes,
    }
}

/// Train and test sets drawn from the same class prototypes.
pub fn synth_train_test(
    seed: u64,
    n_train: usize,
    n_test: usize,
    shape: [usize; 3],
    num_classes: usize,
) -> (Dataset, Dataset) {
    let all = synth_dataset(seed, n_train + n_test, shape, num_classes);
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..n_train + n_test).collect();
    (all.subset(&train), all.subset(&test))
}
