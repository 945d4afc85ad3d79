//! What each defense does to a victim gradient, layer by layer.

use gradleak::data::synth_dataset;
use gradleak::defense::{apply_defense, DefensePolicy};
use gradleak::model::{build_mlp, insert_precode, training_gradient, MlpConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = synth_dataset(1, 1, [1, 8, 8], 10);
    let base = build_mlp(64, 10, &MlpConfig { hidden: vec![64], batchnorm: false, bias: false }, 3)?;
    let model = insert_precode(&base, 16, 0.001, 4)?;
    let grads = training_gradient(&model, &ds.image(0), &ds.labels, &mut ChaCha8Rng::seed_from_u64(0))?;

    let policies = [
        DefensePolicy::None,
        DefensePolicy::Ng { sigma: 0.01 },
        DefensePolicy::Gc { p: 0.9 },
        DefensePolicy::Ppp { inner: Box::new(DefensePolicy::Ng { sigma: 0.01 }) },
        DefensePolicy::Ppp { inner: Box::new(DefensePolicy::Gc { p: 0.9 }) },
    ];
    for policy in &policies {
        let out = apply_defense(policy, &model, &grads, &mut ChaCha8Rng::seed_from_u64(1))?;
        print!("{:<14}", policy.to_string());
        for (g, d) in grads.iter().zip(out.iter()) {
            let zeros = d.grad.data().iter().filter(|v| **v == 0.0).count();
            let moved = d.grad != g.grad;
            print!("  {}.{}: {}{:>4} zeros", g.layer, g.name, if moved { "*" } else { " " }, zeros);
        }
        println!();
    }
    println!("(* marks tensors the defense changed)");
    Ok(())
}
