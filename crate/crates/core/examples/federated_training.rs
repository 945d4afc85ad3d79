//! Federated training under full and partial gradient noise.

use gradleak::data::{split_clients, synth_train_test};
use gradleak::defense::DefensePolicy;
use gradleak::federated::{run_federated, FederatedConfig};
use gradleak::model::{build_mlp, insert_precode, MlpConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (train, test) = synth_train_test(1, 400, 200, [1, 8, 8], 10);
    let shards = split_clients(&train, 4, 2)?;
    let base = build_mlp(64, 10, &MlpConfig { hidden: vec![64], batchnorm: false, bias: false }, 3)?;
    let bottleneck = insert_precode(&base, 16, 0.001, 4)?;

    let noise = DefensePolicy::Ng { sigma: 0.1 };
    let runs = [
        ("none", base.clone(), DefensePolicy::None),
        ("ng(0.1)", base, noise.clone()),
        ("precode", bottleneck.clone(), DefensePolicy::Precode),
        ("ppp(ng(0.1))", bottleneck, DefensePolicy::Ppp { inner: Box::new(noise) }),
    ];
    for (name, model, defense) in runs {
        let config = FederatedConfig {
            clients: 4,
            rounds: 10,
            batch_size: 16,
            defense,
            seed: 5,
            ..FederatedConfig::default()
        };
        let (_, logs) = run_federated(model, &shards, &test, &config)?;
        let acc: Vec<String> = logs.iter().map(|l| format!("{:.2}", l.accuracy)).collect();
        println!("{name:<13} {}", acc.join(" "));
    }
    Ok(())
}
