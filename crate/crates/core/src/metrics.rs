//! Reconstruction quality: MSE, PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// PSNR reported for (near) exact reconstructions.
pub const PSNR_CAP: f64 = 100.0;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn check(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b, "mse")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(range^2 / mse)`, capped at [`PSNR_CAP`] once `mse < 1e-10`.
pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (range * range / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, range))
}

fn gaussian_window() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// SSIM of one window given weights summing to one.
fn window_ssim(a: &[f64], b: &[f64], w: &[f64], c1: f64, c2: f64) -> f64 {
    let (mut ma, mut mb) = (0.0, 0.0);
    for i in 0..w.len() {
        ma += w[i] * a[i];
        mb += w[i] * b[i];
    }
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..w.len() {
        let (da, db) = (a[i] - ma, b[i] - mb);
        va += w[i] * da * da;
        vb += w[i] * db * db;
        cov += w[i] * da * db;
    }
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over valid window
/// positions, per channel, averaged over channels. Planes smaller than the
/// window use one window covering the whole plane with uniform weights.
pub fn ssim(a: &Tensor, b: &Tensor, range: f64) -> Result<f64> {
    check(a, b, "ssim")?;
    let shape = a.shape();
    if shape.len() < 2 {
        return Err(TensorError::Invalid(format!("ssim needs [.., h, w], got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = a.len() / (h * w);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);

    let mut total = 0.0;
    for p in 0..planes {
        let pa = &a.data()[p * h * w..(p + 1) * h * w];
        let pb = &b.data()[p * h * w..(p + 1) * h * w];
        total += if h < WINDOW || w < WINDOW {
            let uniform = vec![1.0 / (h * w) as f64; h * w];
            window_ssim(pa, pb, &uniform, c1, c2)
        } else {
            let g = gaussian_window();
            let weights: Vec<f64> = (0..WINDOW * WINDOW).map(|i| g[i / WINDOW] * g[i % WINDOW]).collect();
            let mut wa = vec![0.0; WINDOW * WINDOW];
            let mut wb = vec![0.0; WINDOW * WINDOW];
            let mut sum = 0.0;
            for y in 0..=h - WINDOW {
                for x in 0..=w - WINDOW {
                    for dy in 0..WINDOW {
                        let row = (y + dy) * w + x;
                        wa[dy * WINDOW..(dy + 1) * WINDOW].copy_from_slice(&pa[row..row + WINDOW]);
                        wb[dy * WINDOW..(dy + 1) * WINDOW].copy_from_slice(&pb[row..row + WINDOW]);
                    }
                    sum += window_ssim(&wa, &wb, &weights, c1, c2);
                }
            }
            sum / ((h - WINDOW + 1) * (w - WINDOW + 1)) as f64
        };
    }
    Ok(total / planes as f64)
}

pub fn image_metrics(a: &Tensor, b: &Tensor, range: f64) -> Result<ImageMetrics> {
    if !(range > 0.0) {
        return Err(TensorError::Invalid(format!("data range must be positive, got {range}")));
    }
    let mse = mse(a, b)?;
    Ok(ImageMetrics {
        mse,
        psnr: psnr_from_mse(mse, range),
        ssim: ssim(a, b, range)?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn img(shape: Vec<usize>, seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| v.abs())
    }

    #[test]
    fn identical_images() {
        for shape in [vec![1, 8, 8], vec![3, 16, 12]] {
            let a = img(shape, 1);
            let m = image_metrics(&a, &a, 1.0).unwrap();
            assert_eq!(m.mse, 0.0);
            assert_eq!(m.psnr, PSNR_CAP);
            assert_eq!(m.ssim, 1.0);
        }
    }

    #[test]
    fn formula_examples() {
        let zeros = Tensor::zeros(vec![1, 4, 4]);
        let ones = Tensor::full(vec![1, 4, 4], 1.0);
        let m = image_metrics(&zeros, &ones, 1.0).unwrap();
        assert_eq!(m.mse, 1.0);
        assert_eq!(m.psnr, 0.0);

        let a = img(vec![1, 6, 6], 2).map(|v| v * 0.5);
        let b = a.map(|v| v + 0.1);
        let m = image_metrics(&a, &b, 1.0).unwrap();
        assert!((m.mse - 0.01).abs() < 1e-12);
        assert!((m.psnr - 20.0).abs() < 1e-9);
    }

    #[test]
    fn windowed_ssim_matches_hand_value_for_shift() {
        // For b = a + s with uniform weights the contrast term is 1 and the
        // luminance term is (2 mu (mu + s) + c1) / (mu^2 + (mu + s)^2 + c1).
        let a = Tensor::full(vec![1, 5, 5], 0.3);
        let b = Tensor::full(vec![1, 5, 5], 0.5);
        let c1 = 1e-4;
        let expected = (2.0 * 0.3 * 0.5 + c1) / (0.09 + 0.25 + c1);
        assert!((ssim(&a, &b, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        assert!(image_metrics(&Tensor::zeros(vec![1, 2, 2]), &Tensor::zeros(vec![1, 2, 3]), 1.0).is_err());
        assert!(image_metrics(&Tensor::zeros(vec![1, 2, 2]), &Tensor::zeros(vec![1, 2, 2]), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), big in any::<bool>()) {
            let shape = if big { vec![2, 13, 12] } else { vec![1, 7, 5] };
            let a = img(shape.clone(), seed);
            let b = img(shape, seed.wrapping_add(1));
            let ab = ssim(&a, &b, 1.0).unwrap();
            let ba = ssim(&b, &a, 1.0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        }

        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-9f64..10.0, m2 in 1e-9f64..10.0) {
            prop_assume!(m1 < m2);
            prop_assert!(psnr_from_mse(m1, 1.0) > psnr_from_mse(m2, 1.0));
        }
    }
}
