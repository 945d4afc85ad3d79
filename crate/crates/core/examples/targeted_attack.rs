//! A bottleneck model resists the attack that matches every layer, but not
//! the one that matches only the layers before the bottleneck.

use gradleak::attack::{run_attack, AttackSpec, LayerSelection};
use gradleak::data::synth_dataset;
use gradleak::metrics::image_metrics;
use gradleak::model::{build_mlp, insert_precode, training_gradient, MlpConfig};
use gradleak::report::pixel_stats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = synth_dataset(7, 20, [1, 8, 8], 10);
    let base = build_mlp(64, 10, &MlpConfig { hidden: vec![64], batchnorm: false, bias: false }, 3)?;
    let model = insert_precode(&base, 16, 0.001, 4)?;

    for selection in [LayerSelection::All, LayerSelection::PreBottleneck] {
        let layers = selection.resolve(&model);
        let mut ssim = 0.0;
        let mut iters = 0;
        for v in 0..3 {
            let (x, label) = (ds.image(v), ds.labels[v]);
            let observed = training_gradient(&model, &x, &[label], &mut ChaCha8Rng::seed_from_u64(v as u64))?;
            let spec = AttackSpec {
                label,
                selection: layers,
                normalization: Some(pixel_stats(&ds)),
                ..AttackSpec::default()
            };
            let r = run_attack(&model, &observed, &[1, 8, 8], &spec, &mut ChaCha8Rng::seed_from_u64(100 + v as u64))?;
            ssim += image_metrics(&x, &r.image, 1.0)?.ssim / 3.0;
            iters += r.trace.iterations;
        }
        println!("{:<15} mean ssim {:.3}, {} iterations in total", layers.as_str(), ssim, iters);
    }
    Ok(())
}
