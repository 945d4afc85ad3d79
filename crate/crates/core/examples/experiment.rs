//! A complete experiment from a JSON config: federated training, attacks on
//! defended victims, CSV/JSON reports and image dumps.

use gradleak::report::{render_table, run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("gradleak_experiment");
    let text = format!(
        r#"{{
            "seed": 1,
            "data": {{"source": "synthetic", "shape": [1, 8, 8], "train_size": 200, "victims": 3}},
            "model": {{"hidden": [64]}},
            "vb": {{"k": 16, "beta": 0.001}},
            "defense": {{"kind": "ppp", "inner": {{"kind": "ng", "sigma": 0.1}}}},
            "attack": {{"max_iters": 3000}},
            "federated": {{"clients": 4, "rounds": 3, "batch_size": 16}},
            "output": {{"dir": {:?}}}
        }}"#,
        dir
    );
    let config = ExperimentConfig::from_json(&text)?;
    let report = run_experiment(&config)?;
    print!("{}", render_table(&[report]));
    println!("artifacts in {}", dir.display());
    Ok(())
}
