//! MSE, PSNR and SSIM of a few distortions, plus the PGM round trip.

use gradleak::metrics::image_metrics;
use gradleak::report::{encode_pnm, parse_pnm};
use gradleak::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Tensor::uniform(vec![1, 1, 16, 16], 1.0, &mut rng).map(f64::abs);
    let noise = Tensor::randn(vec![1, 1, 16, 16], &mut rng);
    let cases = [
        ("identical", img.clone()),
        ("shift +0.1", img.map(|v| v + 0.1)),
        ("noise 0.05", img.zip_map(&noise, "add", |a, n| (a + 0.05 * n).clamp(0.0, 1.0))?),
        ("inverted", img.map(|v| 1.0 - v)),
        ("quantized", parse_pnm(&encode_pnm(&img)?)?),
    ];
    for (name, other) in cases {
        let m = image_metrics(&img, &other, 1.0)?;
        println!("{name:<11} mse {:.5}  psnr {:>6.2} dB  ssim {:>7.4}", m.mse, m.psnr, m.ssim);
    }
    Ok(())
}
