//! Closed-form leakage: the input of a biased dense layer and the label of a
//! single sample, read straight off the gradient.

use gradleak::data::synth_dataset;
use gradleak::metrics::mse;
use gradleak::model::{analytic_fc_input_for_layer, analytic_label, build_mlp, training_gradient, MlpConfig, ModelError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = synth_dataset(2, 10, [1, 8, 8], 10);
    let (x, label) = (ds.image(0), ds.labels[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for bias in [true, false] {
        let model = build_mlp(64, 10, &MlpConfig { hidden: vec![32], batchnorm: false, bias }, 1)?;
        let grads = training_gradient(&model, &x, &[label], &mut rng)?;
        match analytic_fc_input_for_layer(&model, &grads, 0) {
            Ok(rec) => println!("bias on:  input recovered, mse {:.2e}", mse(&rec, &x.reshape(vec![64])?)?),
            Err(ModelError::BiasDefenseActive) => println!("bias off: no closed-form input reconstruction"),
            Err(e) => return Err(e.into()),
        }
        let head = grads.get(model.head_layer(), "weight").expect("head weight gradient");
        println!("          label {} recovered as {}", label, analytic_label(head, 1)?);
    }
    Ok(())
}
