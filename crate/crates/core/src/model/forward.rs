use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LayerKind, ModelError, ModelGraph, Objective, Result, BN_EPS};
use crate::autograd::{Tape, Var};
use crate::grads::NamedGradients;
use crate::tensor::Tensor;

/// How the bottleneck draws its code `b = mu + exp(logvar / 2) * eps`.
pub enum Sampling<'a> {
    /// Fresh `eps ~ N(0, I)` per forward.
    Stochastic(&'a mut dyn RngCore),
    /// Caller-supplied `eps` of shape `[batch, k]`; used for gradient checks.
    Frozen(&'a Tensor),
    /// `b = mu`.
    Mean,
}

/// Which statistics batch-norm layers normalize with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics (training). A batch of one normalizes to zero.
    #[default]
    Batch,
    /// Running statistics accumulated during training.
    Running,
}

#[derive(Clone, Copy, Debug)]
pub struct VbVars {
    pub mu: Var,
    pub logvar: Var,
    pub eps: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VbStats {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub eps: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub vb: Option<VbVars>,
    /// `(layer, batch mean, batch variance)` for every batch-norm layer run in
    /// [`BnMode::Batch`].
    pub batch_stats: Vec<(usize, Tensor, Tensor)>,
}

impl ForwardPass {
    pub fn vb_stats(&self, tape: &Tape) -> Option<VbStats> {
        self.vb.map(|v| VbStats {
            mu: tape.value(v.mu).clone(),
            logvar: tape.value(v.logvar).clone(),
            eps: tape.value(v.eps).clone(),
        })
    }
}

impl ModelGraph {
    /// Records a forward pass of `x` on `tape` using the parameter leaves
    /// `params` (one per [`ModelGraph::params`] entry).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        sampling: &mut Sampling<'_>,
        bn: BnMode,
    ) -> Result<ForwardPass> {
        if params.len() != self.params.len() {
            return Err(ModelError::Invalid(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let shape = tape.shape(x).to_vec();
        let batch = *shape.first().ok_or(ModelError::EmptyBatch)?;
        if batch == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let features: usize = shape[1..].iter().product();
        if features != self.input_dim {
            return Err(ModelError::InputShape {
                expected: self.input_dim,
                got: features,
            });
        }
        let mut h = if shape.len() == 2 {
            x
        } else {
            tape.reshape(x, &[batch, features])?
        };

        let param = |layer: usize, name: &str| -> Option<Var> {
            self.params
                .iter()
                .position(|p| p.layer == layer && p.name == name)
                .map(|i| params[i])
        };

        let mut vb = None;
        let mut batch_stats = Vec::new();
        for (i, spec) in self.layers.iter().enumerate() {
            match spec.kind {
                LayerKind::Affine | LayerKind::VbDecoder | LayerKind::Head => {
                    let w = param(i, "weight").expect("affine layer has a weight");
                    h = tape.affine(h, w, param(i, "bias"))?;
                }
                LayerKind::Relu => h = tape.relu(h)?,
                LayerKind::BatchNorm => {
                    let gamma = param(i, "gamma").expect("batch-norm has gamma");
                    let beta = param(i, "beta").expect("batch-norm has beta");
                    let (mean, var) = match bn {
                        BnMode::Batch => {
                            let mean = tape.mean_rows(h)?;
                            let var = tape.variance_rows(h)?;
                            batch_stats.push((i, tape.value(mean).clone(), tape.value(var).clone()));
                            (mean, var)
                        }
                        BnMode::Running => {
                            let stats = self
                                .running
                                .iter()
                                .find(|r| r.layer == i)
                                .expect("running stats for every batch-norm layer");
                            let mean = tape.var(stats.mean.reshape(vec![1, spec.width])?);
                            let var = tape.var(stats.var.reshape(vec![1, spec.width])?);
                            (mean, var)
                        }
                    };
                    let mean_b = tape.broadcast_rows(mean, batch)?;
                    let centered = tape.sub(h, mean_b)?;
                    let shifted = tape.add_scalar(var, BN_EPS)?;
                    let std = tape.sqrt(shifted)?;
                    let inv = tape.reciprocal(std)?;
                    let inv_b = tape.broadcast_rows(inv, batch)?;
                    let normed = tape.mul(centered, inv_b)?;
                    let gamma_b = tape.broadcast_rows(gamma, batch)?;
                    let beta_b = tape.broadcast_rows(beta, batch)?;
                    let scaled = tape.mul(normed, gamma_b)?;
                    h = tape.add(scaled, beta_b)?;
                }
                LayerKind::VbBottleneck => {
                    let k = spec.width / 2;
                    let w = param(i, "weight").expect("bottleneck has a weight");
                    let stats = tape.affine(h, w, param(i, "bias"))?;
                    let mu = tape.slice(stats, 1, 0, k)?;
                    let logvar = tape.slice(stats, 1, k, 2 * k)?;
                    let eps_value = match sampling {
                        Sampling::Stochastic(rng) => {
                            let data = (0..batch * k).map(|_| rng.sample(StandardNormal)).collect();
                            Tensor::new(vec![batch, k], data)?
                        }
                        Sampling::Frozen(eps) => {
                            if eps.shape() != [batch, k] {
                                return Err(crate::tensor::TensorError::ShapeMismatch {
                                    op: "frozen eps",
                                    lhs: vec![batch, k],
                                    rhs: eps.shape().to_vec(),
                                }
                                .into());
                            }
                            (*eps).clone()
                        }
                        Sampling::Mean => Tensor::zeros(vec![batch, k]),
                    };
                    let eps = tape.var(eps_value);
                    let half = tape.scale(logvar, 0.5)?;
                    let sigma = tape.exp(half)?;
                    let noise = tape.mul(sigma, eps)?;
                    h = if matches!(sampling, Sampling::Mean) {
                        mu
                    } else {
                        tape.add(mu, noise)?
                    };
                    vb = Some(VbVars { mu, logvar, eps });
                }
            }
        }
        Ok(ForwardPass {
            logits: h,
            vb,
            batch_stats,
        })
    }

    /// Cross-entropy plus `beta * KL` when the forward pass went through a
    /// bottleneck.
    pub fn loss_on_tape(&self, tape: &mut Tape, pass: &ForwardPass, labels: &[usize]) -> Result<Var> {
        let classes = self.num_classes();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(ModelError::LabelOutOfRange { label, classes });
        }
        let ce = match self.objective {
            Objective::CrossEntropy => tape.softmax_cross_entropy(pass.logits, labels)?,
            Objective::SquaredError => {
                let (batch, _) = tape.value(pass.logits).dims2()?;
                let mut onehot = Tensor::zeros(vec![batch, classes]);
                for (i, &l) in labels.iter().enumerate() {
                    onehot.data_mut()[i * classes + l] = 1.0;
                }
                let target = tape.var(onehot);
                let diff = tape.sub(pass.logits, target)?;
                let sq = tape.square(diff)?;
                let s = tape.sum(sq)?;
                tape.scale(s, 1.0 / (batch * classes) as f64)?
            }
        };
        match (pass.vb, self.vb) {
            (Some(v), Some(cfg)) => {
                let kl = kl_on_tape(tape, v.mu, v.logvar)?;
                let weighted = tape.scale(kl, cfg.beta)?;
                Ok(tape.add(ce, weighted)?)
            }
            _ => Ok(ce),
        }
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn param_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.var(p.value.clone())).collect()
    }
}

/// `0.5 * sum_k (mu^2 + exp(logvar) - logvar - 1)`, averaged over the batch.
fn kl_on_tape(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let batch = tape.value(mu).dims2()?.0;
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -1.0)?;
    let s = tape.sum(c)?;
    Ok(tape.scale(s, 0.5 / batch as f64)?)
}

/// Closed-form KL between `N(mu, exp(logvar))` and `N(0, I)`, summed over
/// latent dimensions and averaged over the batch.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.var(mu.clone());
    let l = tape.var(logvar.clone());
    let kl = kl_on_tape(&mut tape, m, l)?;
    Ok(tape.value(kl).item())
}

/// Logits and bottleneck statistics for `x`.
pub fn forward(
    model: &ModelGraph,
    x: &Tensor,
    sampling: &mut Sampling<'_>,
    bn: BnMode,
) -> Result<(Tensor, Option<VbStats>)> {
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let params = model.param_leaves(&mut tape);
    let pass = model.forward_on_tape(&mut tape, xv, &params, sampling, bn)?;
    Ok((tape.value(pass.logits).clone(), pass.vb_stats(&tape)))
}

/// Training loss for given logits and optional bottleneck statistics.
pub fn loss(logits: &Tensor, labels: &[usize], vb: Option<&VbStats>, beta: f64) -> Result<f64> {
    if beta < 0.0 {
        return Err(ModelError::Invalid(format!("negative KL weight {beta}")));
    }
    let classes = logits.dims2()?.1;
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    let mut tape = Tape::new();
    let z = tape.var(logits.clone());
    let ce = tape.softmax_cross_entropy(z, labels)?;
    let mut total = tape.value(ce).item();
    if let Some(stats) = vb {
        total += beta * kl_divergence(&stats.mu, &stats.logvar)?;
    }
    Ok(total)
}

/// Gradients of `loss` with respect to the parameter leaves, as values.
pub fn backward(tape: &mut Tape, loss: Var, params: &[Var], model: &ModelGraph) -> Result<NamedGradients> {
    let grads = tape.grad_values(loss, params)?;
    Ok(NamedGradients::from_model(model, grads))
}

/// The gradient an observer of one training step sees: stochastic sampling
/// and batch statistics.
pub fn training_gradient(model: &ModelGraph, x: &Tensor, labels: &[usize], rng: &mut dyn RngCore) -> Result<NamedGradients> {
    let (g, _, _) = training_gradient_with(model, x, labels, &mut Sampling::Stochastic(rng), BnMode::Batch)?;
    Ok(g)
}

/// Gradient, loss value and batch-norm batch statistics of one step.
pub fn training_gradient_with(
    model: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    sampling: &mut Sampling<'_>,
    bn: BnMode,
) -> Result<(NamedGradients, f64, Vec<(usize, Tensor, Tensor)>)> {
    if labels.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let params = model.param_leaves(&mut tape);
    let pass = model.forward_on_tape(&mut tape, xv, &params, sampling, bn)?;
    let l = model.loss_on_tape(&mut tape, &pass, labels)?;
    let value = tape.value(l).item();
    let grads = backward(&mut tape, l, &params, model)?;
    Ok((grads, value, pass.batch_stats))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::{finite_difference_check, FdProbes};
    use crate::model::{build_mlp, insert_precode, LayerSpec, MlpConfig, Role};

    fn small(batchnorm: bool, bias: bool, vb: bool) -> ModelGraph {
        let cfg = MlpConfig {
            hidden: vec![6, 5],
            batchnorm,
            bias,
        };
        let m = build_mlp(8, 4, &cfg, 11).unwrap();
        if vb {
            insert_precode(&m, 3, 0.5, 12).unwrap()
        } else {
            m
        }
    }

    fn batch(rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![rows, 8], &mut rng)
    }

    #[test]
    fn without_vb_forward_ignores_rng() {
        let m = small(true, true, false);
        let x = batch(3, 1);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let (a, _) = forward(&m, &x, &mut Sampling::Stochastic(&mut r1), BnMode::Batch).unwrap();
        let (b, _) = forward(&m, &x, &mut Sampling::Stochastic(&mut r2), BnMode::Batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_eps_samples_the_mean() {
        let m = small(false, false, true);
        let x = batch(2, 3);
        let eps = Tensor::zeros(vec![2, 3]);
        let (frozen, stats) = forward(&m, &x, &mut Sampling::Frozen(&eps), BnMode::Batch).unwrap();
        let (mean, _) = forward(&m, &x, &mut Sampling::Mean, BnMode::Batch).unwrap();
        assert_eq!(frozen, mean);
        assert_eq!(stats.unwrap().eps, eps);
    }

    #[test]
    fn stochastic_draws_differ() {
        let m = small(false, false, true);
        let x = batch(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, _) = forward(&m, &x, &mut Sampling::Stochastic(&mut rng), BnMode::Batch).unwrap();
        let (b, _) = forward(&m, &x, &mut Sampling::Stochastic(&mut rng), BnMode::Batch).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn kl_closed_forms() {
        let zero = Tensor::zeros(vec![1, 4]);
        assert_eq!(kl_divergence(&zero, &zero).unwrap(), 0.0);
        let mu = Tensor::matrix(&[&[1.0]]);
        let lv = Tensor::matrix(&[&[0.0]]);
        assert!((kl_divergence(&mu, &lv).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let logits = Tensor::zeros(vec![2, 10]);
        let l = loss(&logits, &[3, 7], None, 0.0).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn kl_weight_enters_loss() {
        let logits = Tensor::zeros(vec![1, 2]);
        let stats = VbStats {
            mu: Tensor::matrix(&[&[1.0]]),
            logvar: Tensor::matrix(&[&[0.0]]),
            eps: Tensor::matrix(&[&[0.0]]),
        };
        let l = loss(&logits, &[0], Some(&stats), 1.0).unwrap();
        assert!((l - (2f64.ln() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(matches!(
            loss(&logits, &[3], None, 0.0),
            Err(ModelError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn zero_parameter_model_has_no_gradients() {
        let m = ModelGraph {
            input_dim: 3,
            layers: vec![LayerSpec {
                kind: LayerKind::Relu,
                in_width: 3,
                width: 3,
                bias: false,
                role: Role::Head,
            }],
            params: vec![],
            running: vec![],
            vb: None,
            objective: Objective::default(),
        };
        let x = Tensor::matrix(&[&[0.5, -1.0, 2.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = training_gradient(&m, &x, &[1], &mut rng).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn training_gradient_is_deterministic_and_structured() {
        let m = small(true, false, true);
        let x = batch(4, 8);
        let labels = [0, 1, 2, 3];
        let g1 = training_gradient(&m, &x, &labels, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let g2 = training_gradient(&m, &x, &labels, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1.len(), m.params.len());
        for (g, p) in g1.iter().zip(&m.params) {
            assert_eq!((g.layer, &g.name, g.role), (p.layer, &p.name, p.role));
            assert_eq!(g.grad.shape(), p.value.shape());
        }
    }

    #[test]
    fn frozen_full_model_matches_finite_differences() {
        for (bn, bias) in [(true, false), (false, true)] {
            let m = small(bn, bias, true);
            let x = batch(3, 21);
            let eps = Tensor::randn(vec![3, 3], &mut ChaCha8Rng::seed_from_u64(22));
            let labels = [2, 0, 3];
            let err = finite_difference_check(
                |tape, ps| {
                    let xv = tape.var(x.clone());
                    let pass = m
                        .forward_on_tape(tape, xv, ps, &mut Sampling::Frozen(&eps), BnMode::Batch)
                        .map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
                    m.loss_on_tape(tape, &pass, &labels)
                        .map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))
                },
                &m.param_values(),
                1e-5,
                FdProbes::All,
            )
            .unwrap();
            assert!(err < 1e-4, "bn={bn} bias={bias}: {err}");
        }
    }

    #[test]
    fn bias_before_batchnorm_gets_no_gradient() {
        let m = small(true, true, true);
        let g = training_gradient(&m, &batch(3, 21), &[2, 0, 3], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(g.get(0, "bias").unwrap().data().iter().all(|v| v.abs() < 1e-12));
        assert!(g.get(0, "weight").unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn batch_of_one_batchnorm_outputs_beta() {
        let m = build_mlp(
            4,
            2,
            &MlpConfig {
                hidden: vec![3],
                batchnorm: true,
                bias: false,
            },
            0,
        )
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.var(Tensor::matrix(&[&[1.0, -2.0, 0.5, 3.0]]));
        let params = m.param_leaves(&mut tape);
        let pass = m
            .forward_on_tape(&mut tape, x, &params, &mut Sampling::Mean, BnMode::Batch)
            .unwrap();
        let l = m.loss_on_tape(&mut tape, &pass, &[1]).unwrap();
        let grads = backward(&mut tape, l, &params, &m).unwrap();
        // Normalized activations are exactly zero, so nothing reaches the
        // first affine layer but beta still trains.
        assert_eq!(grads.get(0, "weight").unwrap().max_abs(), 0.0);
        assert_eq!(grads.get(1, "gamma").unwrap().max_abs(), 0.0);
    }
}
