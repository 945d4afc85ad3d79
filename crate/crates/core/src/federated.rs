//! Deterministic simulation of federated training with defended updates.
//!
//! Each round broadcasts the global model, lets every client train locally
//! for a few epochs, perturbs the resulting parameter deltas with the
//! configured defense, and adds the mean delta to the global model. Client
//! work runs in parallel; every client draws from its own generator derived
//! from `(seed, round, client)`, so thread scheduling never changes results.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::defense::{apply_defense, DefenseError, DefensePolicy};
use crate::grads::NamedGradients;
use crate::model::{
    forward, training_gradient_with, BnMode, LayerKind, ModelError, ModelGraph, RunningStats, Sampling,
};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Tensor, TensorError};

/// Momentum of the batch-norm running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FederatedError {
    #[error("client has no training data")]
    EmptyClient,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("nothing to aggregate")]
    NoUpdates,
    #[error("client updates have different shapes")]
    ShapeMismatch,
    #[error("invalid federated config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FederatedError> = std::result::Result<T, E>;

/// How the bottleneck samples during evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSampling {
    /// One fresh draw per test sample, like the training path.
    #[default]
    Stochastic,
    /// Decode the mean code.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub defense: DefensePolicy,
    pub eval_sampling: EvalSampling,
    pub seed: u64,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            rounds: 10,
            local_epochs: 1,
            batch_size: 64,
            adam: AdamConfig::default(),
            defense: DefensePolicy::None,
            eval_sampling: EvalSampling::Stochastic,
            seed: 0,
        }
    }
}

impl FederatedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FederatedError::Config(m.into()));
        if self.clients == 0 {
            return bad("clients must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.adam.lr > 0.0) {
            return bad("adam.lr must be positive");
        }
        self.defense.validate()?;
        Ok(())
    }
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub accuracy: f64,
    pub defense: String,
    pub seed: u64,
    /// Global L2 norm of each client's exchanged (defended) update.
    pub update_norms: Vec<f64>,
}

/// A client's exchanged update plus its batch-norm running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    /// `local - global`, one tensor per parameter.
    pub delta: NamedGradients,
    pub running: Vec<RunningStats>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `client` in `round`, independent of execution order.
pub fn client_rng(seed: u64, round: usize, client: usize) -> ChaCha8Rng {
    let s = mix(mix(mix(seed) ^ round as u64) ^ client as u64);
    ChaCha8Rng::seed_from_u64(s)
}

fn has_batchnorm(model: &ModelGraph) -> bool {
    model.layers.iter().any(|l| l.kind == LayerKind::BatchNorm)
}

/// Trains a copy of `global` on `data` for `config.local_epochs` epochs.
///
/// Batches are drawn from a fresh shuffle per epoch with a fresh Adam state.
/// With batch-norm, a trailing batch of one sample is skipped since its batch
/// statistics carry no information.
pub fn local_train(
    global: &ModelGraph,
    data: &Dataset,
    config: &FederatedConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ModelGraph> {
    if data.is_empty() {
        return Err(FederatedError::EmptyClient);
    }
    let mut model = global.clone();
    let mut values = model.param_values();
    let mut adam = AdamState::new(config.adam, values.iter());
    let bn = has_batchnorm(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            if bn && chunk.len() < 2 {
                continue;
            }
            let (x, labels) = data.batch(chunk);
            let (grads, _, stats) =
                training_gradient_with(&model, &x, &labels, &mut Sampling::Stochastic(rng), BnMode::Batch)?;
            let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
            adam.step(&mut refs, &grads.tensors())?;
            model.set_param_values(values.clone())?;
            model.update_running(&stats, BN_MOMENTUM, chunk.len());
        }
    }
    Ok(model)
}

/// [`local_train`] followed by `local - global`.
pub fn local_update(
    global: &ModelGraph,
    data: &Dataset,
    config: &FederatedConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LocalUpdate> {
    let local = local_train(global, data, config, rng)?;
    let delta = global
        .params
        .iter()
        .zip(&local.params)
        .map(|(g, l)| l.value.zip_map(&g.value, "delta", |a, b| a - b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LocalUpdate {
        delta: NamedGradients::from_model(global, delta),
        running: local.running,
    })
}

/// Unweighted element-wise mean of client deltas, summed in list order.
pub fn aggregate(deltas: &[NamedGradients]) -> Result<NamedGradients> {
    let first = deltas.first().ok_or(FederatedError::NoUpdates)?;
    if deltas.iter().any(|d| !d.same_structure(first)) {
        return Err(FederatedError::ShapeMismatch);
    }
    let n = deltas.len() as f64;
    let mut out = first.clone();
    for (i, g) in out.0.iter_mut().enumerate() {
        let data = g.grad.data_mut();
        for d in &deltas[1..] {
            for (acc, v) in data.iter_mut().zip(d.0[i].grad.data()) {
                *acc += v;
            }
        }
        for v in data.iter_mut() {
            *v /= n;
        }
    }
    Ok(out)
}

fn mean_running(updates: &[LocalUpdate]) -> Vec<RunningStats> {
    let n = updates.len() as f64;
    let mut out = updates[0].running.clone();
    for (i, r) in out.iter_mut().enumerate() {
        for u in &updates[1..] {
            for (a, b) in r.mean.data_mut().iter_mut().zip(u.running[i].mean.data()) {
                *a += b;
            }
            for (a, b) in r.var.data_mut().iter_mut().zip(u.running[i].var.data()) {
                *a += b;
            }
        }
        r.mean = r.mean.map(|v| v / n);
        r.var = r.var.map(|v| v / n);
    }
    out
}

/// Fraction of `test` whose argmax logit matches the label, with batch-norm
/// on running statistics.
pub fn evaluate(model: &ModelGraph, test: &Dataset, sampling: EvalSampling, rng: &mut ChaCha8Rng) -> Result<f64> {
    if test.is_empty() {
        return Err(FederatedError::EmptyTestSet);
    }
    let indices: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (x, labels) = test.batch(chunk);
        let logits = match sampling {
            EvalSampling::Stochastic => forward(model, &x, &mut Sampling::Stochastic(rng), BnMode::Running)?.0,
            EvalSampling::Mean => forward(model, &x, &mut Sampling::Mean, BnMode::Running)?.0,
        };
        let classes = logits.dims2()?.1;
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i);
            if best == Some(label) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Global model plus the index of the next round.
#[derive(Clone, Debug)]
pub struct FederatedState {
    pub model: ModelGraph,
    pub round: usize,
}

/// Broadcast, parallel local training, defense, aggregation and evaluation.
pub fn run_round(
    state: &mut FederatedState,
    shards: &[Dataset],
    test: &Dataset,
    config: &FederatedConfig,
) -> Result<RoundLog> {
    if shards.is_empty() {
        return Err(FederatedError::NoUpdates);
    }
    let global = &state.model;
    let round = state.round;
    let updates: Vec<LocalUpdate> = shards
        .par_iter()
        .enumerate()
        .map(|(client, shard)| {
            let mut rng = client_rng(config.seed, round, client);
            let mut update = local_update(global, shard, config, &mut rng)?;
            update.delta = apply_defense(&config.defense, global, &update.delta, &mut rng)?;
            Ok(update)
        })
        .collect::<Result<_>>()?;

    let deltas: Vec<NamedGradients> = updates.iter().map(|u| u.delta.clone()).collect();
    let mean = aggregate(&deltas)?;
    let values = global
        .params
        .iter()
        .zip(&mean)
        .map(|(p, d)| p.value.zip_map(&d.grad, "apply", |a, b| a + b))
        .collect::<Result<Vec<_>, _>>()?;
    let running = mean_running(&updates);
    state.model.set_param_values(values)?;
    state.model.running = running;
    state.round += 1;

    let mut eval_rng = client_rng(config.seed, round, usize::MAX);
    let accuracy = evaluate(&state.model, test, config.eval_sampling, &mut eval_rng)?;
    log::info!("round {round}: accuracy {accuracy:.4}");
    Ok(RoundLog {
        round,
        accuracy,
        defense: config.defense.to_string(),
        seed: config.seed,
        update_norms: deltas.iter().map(NamedGradients::global_norm).collect(),
    })
}

/// Runs `config.rounds` rounds from `model` over the given client shards.
pub fn run_federated(
    model: ModelGraph,
    shards: &[Dataset],
    test: &Dataset,
    config: &FederatedConfig,
) -> Result<(ModelGraph, Vec<RoundLog>)> {
    config.validate()?;
    if shards.len() != config.clients {
        return Err(FederatedError::Config(format!(
            "{} shards for {} clients",
            shards.len(),
            config.clients
        )));
    }
    if config.defense.needs_vb() && !model.has_vb() {
        return Err(FederatedError::Defense(DefenseError::NoVb));
    }
    let mut state = FederatedState { model, round: 0 };
    let mut logs = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        logs.push(run_round(&mut state, shards, test, config)?);
    }
    Ok((state.model, logs))
}

/// Appends one JSON object per round: `{round, accuracy, defense, seed}`.
pub fn write_round_logs<W: Write>(logs: &[RoundLog], mut out: W) -> Result<()> {
    for log in logs {
        let line = serde_json::json!({
            "round": log.round,
            "accuracy": log.accuracy,
            "defense": log.defense,
            "seed": log.seed,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{split_clients, synth_train_test};
    use crate::model::{build_mlp, insert_precode, MlpConfig};

    fn setup(bn: bool) -> (ModelGraph, Dataset, Dataset) {
        let (train, test) = synth_train_test(3, 120, 60, [1, 4, 4], 4);
        let cfg = MlpConfig {
            hidden: vec![12],
            batchnorm: bn,
            bias: true,
        };
        (build_mlp(16, 4, &cfg, 1).unwrap(), train, test)
    }

    fn small_config() -> FederatedConfig {
        FederatedConfig {
            clients: 3,
            rounds: 3,
            batch_size: 16,
            adam: AdamConfig::with_lr(0.01),
            seed: 9,
            ..FederatedConfig::default()
        }
    }

    #[test]
    fn zero_epochs_give_zero_delta() {
        let (m, train, _) = setup(false);
        let cfg = FederatedConfig {
            local_epochs: 0,
            ..small_config()
        };
        let u = local_update(&m, &train, &cfg, &mut client_rng(0, 0, 0)).unwrap();
        assert!(u.delta.iter().all(|g| g.grad.max_abs() == 0.0));
    }

    #[test]
    fn local_update_is_deterministic_and_structured() {
        let (m, train, _) = setup(true);
        let cfg = small_config();
        let a = local_update(&m, &train, &cfg, &mut client_rng(1, 2, 3)).unwrap();
        let b = local_update(&m, &train, &cfg, &mut client_rng(1, 2, 3)).unwrap();
        assert_eq!(a, b);
        let expected = NamedGradients::from_model(&m, m.param_values());
        assert!(a.delta.same_structure(&expected));
    }

    #[test]
    fn empty_client_is_rejected() {
        let (m, _, _) = setup(false);
        let empty = Dataset::empty([1, 4, 4], 4);
        assert!(matches!(
            local_update(&m, &empty, &small_config(), &mut client_rng(0, 0, 0)),
            Err(FederatedError::EmptyClient)
        ));
    }

    fn delta_of(values: &[f64]) -> NamedGradients {
        NamedGradients(vec![crate::grads::NamedGradient {
            layer: 0,
            name: "weight".into(),
            role: crate::model::Role::Head,
            grad: Tensor::vector(values.to_vec()),
        }])
    }

    #[test]
    fn aggregate_means() {
        let one = delta_of(&[2.0, -1.0]);
        assert_eq!(aggregate(std::slice::from_ref(&one)).unwrap(), one);
        assert_eq!(aggregate(&[one.clone(), one.clone()]).unwrap(), one);
        let mean = aggregate(&[delta_of(&[2.0]), delta_of(&[4.0])]).unwrap();
        assert_eq!(mean.0[0].grad.data(), &[3.0]);
        assert!(matches!(aggregate(&[]), Err(FederatedError::NoUpdates)));
        assert!(matches!(
            aggregate(&[delta_of(&[1.0]), delta_of(&[1.0, 2.0])]),
            Err(FederatedError::ShapeMismatch)
        ));
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..6),
            rotate in 0usize..6,
        ) {
            let deltas: Vec<NamedGradients> = rows.iter().map(|r| delta_of(r)).collect();
            let mut shuffled = deltas.clone();
            shuffled.rotate_left(rotate % deltas.len());
            shuffled.reverse();
            let a = aggregate(&deltas).unwrap();
            let b = aggregate(&shuffled).unwrap();
            for (x, y) in a.0[0].grad.data().iter().zip(b.0[0].grad.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn single_client_matches_centralized_training() {
        let (m, train, test) = setup(false);
        let cfg = FederatedConfig {
            clients: 1,
            rounds: 1,
            ..small_config()
        };
        let (fed, _) = run_federated(m.clone(), std::slice::from_ref(&train), &test, &cfg).unwrap();

        // Train the same shard directly, with the generator client 0 gets.
        // Applying `local - global` back onto `global` rounds, so equality
        // holds to a few ulps rather than bitwise.
        let direct = local_train(&m, &train, &cfg, &mut client_rng(cfg.seed, 0, 0)).unwrap();
        for (d, f) in direct.params.iter().zip(&fed.params) {
            for (a, b) in d.value.data().iter().zip(f.value.data()) {
                assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_noise_equals_no_defense() {
        let (m, train, test) = setup(true);
        let shards = split_clients(&train, 3, 0).unwrap();
        let plain = run_federated(m.clone(), &shards, &test, &small_config()).unwrap();
        let cfg = FederatedConfig {
            defense: DefensePolicy::Ng { sigma: 0.0 },
            ..small_config()
        };
        let noisy = run_federated(m, &shards, &test, &cfg).unwrap();
        assert_eq!(plain.0, noisy.0);
        let acc = |l: &[RoundLog]| l.iter().map(|r| r.accuracy).collect::<Vec<_>>();
        assert_eq!(acc(&plain.1), acc(&noisy.1));
    }

    #[test]
    fn runs_are_reproducible() {
        let (m, train, test) = setup(true);
        let m = insert_precode(&m, 3, 0.001, 2).unwrap();
        let shards = split_clients(&train, 3, 0).unwrap();
        let cfg = FederatedConfig {
            defense: DefensePolicy::Ppp {
                inner: Box::new(DefensePolicy::Ng { sigma: 0.01 }),
            },
            ..small_config()
        };
        let a = run_federated(m.clone(), &shards, &test, &cfg).unwrap();
        let b = run_federated(m, &shards, &test, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn accuracy_improves_over_rounds() {
        let (m, train, test) = setup(false);
        let shards = split_clients(&train, 3, 0).unwrap();
        let cfg = FederatedConfig {
            rounds: 10,
            ..small_config()
        };
        let (_, logs) = run_federated(m, &shards, &test, &cfg).unwrap();
        assert!(logs.last().unwrap().accuracy > logs[0].accuracy);
    }

    #[test]
    fn constant_predictor_scores_chance() {
        let (mut m, _, test) = setup(false);
        // Zero weights everywhere except a head bias favouring class 1.
        let values = m
            .params
            .iter()
            .map(|p| {
                let mut v = Tensor::zeros(p.value.shape().to_vec());
                if p.name == "bias" && p.layer == m.head_layer() {
                    v.data_mut()[1] = 1.0;
                }
                v
            })
            .collect();
        m.set_param_values(values).unwrap();
        let acc = evaluate(&m, &test, EvalSampling::Mean, &mut client_rng(0, 0, 0)).unwrap();
        assert!((acc - 0.25).abs() < 1e-12);
        let empty = Dataset::empty([1, 4, 4], 4);
        assert!(matches!(
            evaluate(&m, &empty, EvalSampling::Mean, &mut client_rng(0, 0, 0)),
            Err(FederatedError::EmptyTestSet)
        ));
    }

    #[test]
    fn memorizes_a_tiny_set() {
        let (train, _) = synth_train_test(5, 10, 1, [1, 4, 4], 4);
        let cfg = MlpConfig {
            hidden: vec![32],
            batchnorm: false,
            bias: true,
        };
        let m = build_mlp(16, 4, &cfg, 2).unwrap();
        let fc = FederatedConfig {
            clients: 1,
            rounds: 40,
            batch_size: 10,
            local_epochs: 5,
            adam: AdamConfig::with_lr(0.01),
            ..FederatedConfig::default()
        };
        let (m, _) = run_federated(m, std::slice::from_ref(&train), &train, &fc).unwrap();
        let acc = evaluate(&m, &train, EvalSampling::Mean, &mut client_rng(0, 0, 0)).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn round_log_lines_are_json() {
        let logs = vec![RoundLog {
            round: 0,
            accuracy: 0.5,
            defense: "ng(0.1)".into(),
            seed: 3,
            update_norms: vec![1.0],
        }];
        let mut buf = Vec::new();
        write_round_logs(&logs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["round"], 0);
        assert_eq!(v["defense"], "ng(0.1)");
        assert_eq!(text.lines().count(), 1);
    }
}
