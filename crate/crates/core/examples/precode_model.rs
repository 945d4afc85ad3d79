//! An MLP with a variational bottleneck before its head: forward passes,
//! the KL term and a checkpoint round trip.

use gradleak::model::{
    build_mlp, forward, insert_precode, kl_divergence, read_checkpoint, write_checkpoint, BnMode, MlpConfig, Sampling,
};
use gradleak::metrics;
use gradleak::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = MlpConfig {
        hidden: vec![32],
        batchnorm: false,
        bias: false,
    };
    let base = build_mlp(64, 10, &config, 3)?;
    let model = insert_precode(&base, 16, 0.001, 4)?;
    for (i, layer) in model.layers.iter().enumerate() {
        println!("layer {i}: {:?} {:?}", model.role_of(i), layer.kind);
    }
    println!("{} parameters; bottleneck at layer {:?}", model.parameter_count(), model.bottleneck_layer());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::uniform(vec![2, 64], 1.0, &mut rng).map(f64::abs);
    let (a, stats) = forward(&model, &x, &mut Sampling::Stochastic(&mut rng), BnMode::Batch)?;
    let (b, _) = forward(&model, &x, &mut Sampling::Stochastic(&mut rng), BnMode::Batch)?;
    let (m, _) = forward(&model, &x, &mut Sampling::Mean, BnMode::Batch)?;
    println!("two samples differ by rms {:.4}; mean code logits {:?}", metrics::mse(&a, &b)?.sqrt(), &m.data()[..3]);
    let stats = stats.expect("bottleneck statistics");
    println!("KL to the prior: {:.4}", kl_divergence(&stats.mu, &stats.logvar)?);

    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes)?;
    let back = read_checkpoint(bytes.as_slice())?;
    println!("checkpoint: {} bytes, identical: {}", bytes.len(), back == model);
    Ok(())
}
