//! Reconstructs a private training image from one observed gradient and
//! writes the original and reconstruction as PGM files.

use gradleak::attack::{grad_diagnostics, run_attack, AttackSpec};
use gradleak::data::synth_dataset;
use gradleak::metrics::image_metrics;
use gradleak::model::{build_mlp, training_gradient, MlpConfig};
use gradleak::report::{dump_image, pixel_stats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = synth_dataset(7, 20, [1, 8, 8], 10);
    let model = build_mlp(64, 10, &MlpConfig { hidden: vec![64], batchnorm: false, bias: false }, 3)?;
    let (x, label) = (ds.image(0), ds.labels[0]);
    let observed = training_gradient(&model, &x, &[label], &mut ChaCha8Rng::seed_from_u64(0))?;

    let spec = AttackSpec {
        label,
        max_iters: 5000,
        normalization: Some(pixel_stats(&ds)),
        ..AttackSpec::default()
    };
    let result = run_attack(&model, &observed, &[1, 8, 8], &spec, &mut ChaCha8Rng::seed_from_u64(100))?;
    let m = image_metrics(&x, &result.image, 1.0)?;
    println!(
        "{} after {} iterations: mse {:.5}  psnr {:.2} dB  ssim {:.4}",
        result.termination().as_str(),
        result.trace.iterations,
        m.mse,
        m.psnr,
        m.ssim
    );
    for d in grad_diagnostics(&result.trace)? {
        println!("layer {}: final cosine {:.4}, final norm {:.4}", d.layer, d.final_cos, d.final_norm);
    }

    let dir = std::env::temp_dir().join("gradleak_inversion");
    std::fs::create_dir_all(&dir)?;
    dump_image(&x, dir.join("original.pgm"))?;
    dump_image(&result.image, dir.join("reconstruction.pgm"))?;
    println!("images in {}", dir.display());
    Ok(())
}
