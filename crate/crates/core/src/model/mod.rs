//! MLP classifiers with an optional variational bottleneck before the head.
//!
//! Affine weights are stored `[in, out]` so a layer computes `x @ w (+ b)`
//! on `[batch, in]` inputs.

mod analytic;
mod checkpoint;
mod forward;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub use analytic::{analytic_fc_input, analytic_fc_input_for_layer, analytic_label};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{
    backward, forward, kl_divergence, loss, training_gradient, training_gradient_with, BnMode,
    ForwardPass, Sampling, VbStats, VbVars,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("hidden layer list is empty")]
    EmptyHidden,
    #[error("layer widths must be positive")]
    ZeroWidth,
    #[error("model already contains a variational bottleneck")]
    VbAlreadyPresent,
    #[error("model has no variational bottleneck")]
    NoVb,
    #[error("input has {got} features, model expects {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("bias gradient has no non-zero entry; input is not reconstructible")]
    NotReconstructible,
    #[error("layer has no bias; analytic reconstruction is blocked")]
    BiasDefenseActive,
    #[error("label cannot be read off the head gradient unambiguously")]
    Ambiguous,
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Position of a layer relative to the variational bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PreBottleneck,
    Bottleneck,
    Decoder,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Affine,
    BatchNorm,
    Relu,
    VbBottleneck,
    VbDecoder,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_width: usize,
    pub width: usize,
    pub bias: bool,
    pub role: Role,
}

impl LayerSpec {
    fn has_weight(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Affine | LayerKind::VbBottleneck | LayerKind::VbDecoder | LayerKind::Head
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VbConfig {
    /// Size of the sampled code; the bottleneck layer emits `2k` values.
    pub k: usize,
    /// Weight of the KL term in the training loss.
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub layer: usize,
    pub name: String,
    pub role: Role,
    pub value: Tensor,
}

/// Batch-norm running statistics, used in [`BnMode::Running`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub layer: usize,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Training loss on the logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    CrossEntropy,
    /// Mean squared error against one-hot targets.
    SquaredError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Param>,
    pub running: Vec<RunningStats>,
    pub vb: Option<VbConfig>,
    pub objective: Objective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub batchnorm: bool,
    pub bias: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![1024; 4],
            batchnorm: true,
            bias: false,
        }
    }
}

/// Kaiming-uniform weights `U(-gain * sqrt(3 / fan_in), gain * sqrt(3 / fan_in))`
/// with gain `sqrt(2)` for layers feeding a ReLU and 1 otherwise. Biases are
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn init_affine(rng: &mut ChaCha8Rng, layer: usize, spec: &LayerSpec) -> Vec<Param> {
    let fan_in = spec.in_width as f64;
    let bound = 1.0 / fan_in.sqrt();
    let gain = if spec.kind == LayerKind::Affine { 2.0f64.sqrt() } else { 1.0 };
    let mut out = vec![Param {
        layer,
        name: "weight".into(),
        role: spec.role,
        value: Tensor::uniform(vec![spec.in_width, spec.width], gain * (3.0 / fan_in).sqrt(), rng),
    }];
    if spec.bias {
        out.push(Param {
            layer,
            name: "bias".into(),
            role: spec.role,
            value: Tensor::uniform(vec![spec.width], bound, rng),
        });
    }
    out
}

fn init_batchnorm(layer: usize, spec: &LayerSpec) -> Vec<Param> {
    vec![
        Param {
            layer,
            name: "gamma".into(),
            role: spec.role,
            value: Tensor::full(vec![spec.width], 1.0),
        },
        Param {
            layer,
            name: "beta".into(),
            role: spec.role,
            value: Tensor::zeros(vec![spec.width]),
        },
    ]
}

/// Affine -> [batch-norm] -> ReLU blocks followed by a linear head.
pub fn build_mlp(input_dim: usize, num_classes: usize, config: &MlpConfig, seed: u64) -> Result<ModelGraph> {
    if config.hidden.is_empty() {
        return Err(ModelError::EmptyHidden);
    }
    if input_dim == 0 || num_classes == 0 || config.hidden.contains(&0) {
        return Err(ModelError::ZeroWidth);
    }
    let mut layers = Vec::new();
    let mut prev = input_dim;
    for &w in &config.hidden {
        layers.push(LayerSpec {
            kind: LayerKind::Affine,
            in_width: prev,
            width: w,
            bias: config.bias,
            role: Role::PreBottleneck,
        });
        if config.batchnorm {
            layers.push(LayerSpec {
                kind: LayerKind::BatchNorm,
                in_width: w,
                width: w,
                bias: false,
                role: Role::PreBottleneck,
            });
        }
        layers.push(LayerSpec {
            kind: LayerKind::Relu,
            in_width: w,
            width: w,
            bias: false,
            role: Role::PreBottleneck,
        });
        prev = w;
    }
    layers.push(LayerSpec {
        kind: LayerKind::Head,
        in_width: prev,
        width: num_classes,
        bias: config.bias,
        role: Role::Head,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut running = Vec::new();
    for (i, spec) in layers.iter().enumerate() {
        match spec.kind {
            LayerKind::BatchNorm => {
                params.extend(init_batchnorm(i, spec));
                running.push(RunningStats {
                    layer: i,
                    mean: Tensor::zeros(vec![spec.width]),
                    var: Tensor::full(vec![spec.width], 1.0),
                });
            }
            _ if spec.has_weight() => params.extend(init_affine(&mut rng, i, spec)),
            _ => {}
        }
    }
    Ok(ModelGraph {
        input_dim,
        layers,
        params,
        running,
        vb: None,
        objective: Objective::default(),
    })
}

/// Inserts a variational bottleneck (`last -> 2k`) and decoder (`k -> last`)
/// between the last feature layer and the head.
pub fn insert_precode(model: &ModelGraph, k: usize, beta: f64, seed: u64) -> Result<ModelGraph> {
    if model.vb.is_some() {
        return Err(ModelError::VbAlreadyPresent);
    }
    if k == 0 {
        return Err(ModelError::ZeroWidth);
    }
    let head_at = model.layers.len() - 1;
    let features = model.layers[head_at].in_width;
    let bias = model.layers[head_at].bias;
    let bottleneck = LayerSpec {
        kind: LayerKind::VbBottleneck,
        in_width: features,
        width: 2 * k,
        bias,
        role: Role::Bottleneck,
    };
    let decoder = LayerSpec {
        kind: LayerKind::VbDecoder,
        in_width: k,
        width: features,
        bias,
        role: Role::Decoder,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = model.layers.clone();
    layers.insert(head_at, decoder.clone());
    layers.insert(head_at, bottleneck.clone());

    // Head moves two slots down.
    let shift = |layer: usize| if layer >= head_at { layer + 2 } else { layer };
    let mut params: Vec<Param> = model
        .params
        .iter()
        .filter(|p| p.layer < head_at)
        .cloned()
        .collect();
    params.extend(init_affine(&mut rng, head_at, &bottleneck));
    params.extend(init_affine(&mut rng, head_at + 1, &decoder));
    params.extend(model.params.iter().filter(|p| p.layer >= head_at).map(|p| Param {
        layer: shift(p.layer),
        ..p.clone()
    }));
    Ok(ModelGraph {
        input_dim: model.input_dim,
        layers,
        params,
        running: model.running.clone(),
        vb: Some(VbConfig { k, beta }),
        objective: model.objective,
    })
}

impl ModelGraph {
    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.width)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(ModelError::Invalid(format!(
                "{} values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "set_param_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                }
                .into());
            }
            p.value = v;
        }
        Ok(())
    }

    /// Folds batch statistics into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`, with the batch
    /// variance made unbiased over `batch` samples.
    pub fn update_running(&mut self, batch_stats: &[(usize, Tensor, Tensor)], momentum: f64, batch: usize) {
        let correction = if batch > 1 { batch as f64 / (batch - 1) as f64 } else { 1.0 };
        for (layer, mean, var) in batch_stats {
            if let Some(r) = self.running.iter_mut().find(|r| r.layer == *layer) {
                for (old, new) in r.mean.data_mut().iter_mut().zip(mean.data()) {
                    *old = (1.0 - momentum) * *old + momentum * new;
                }
                for (old, new) in r.var.data_mut().iter_mut().zip(var.data()) {
                    *old = (1.0 - momentum) * *old + momentum * new * correction;
                }
            }
        }
    }

    pub fn has_vb(&self) -> bool {
        self.vb.is_some()
    }

    /// Index of the bottleneck layer, if present.
    pub fn bottleneck_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.kind == LayerKind::VbBottleneck)
    }

    /// Ids of layers that carry parameters.
    pub fn param_layers(&self) -> BTreeSet<usize> {
        self.params.iter().map(|p| p.layer).collect()
    }

    /// Parameterized layers strictly before the bottleneck.
    pub fn pre_bottleneck_layers(&self) -> Result<BTreeSet<usize>> {
        if !self.has_vb() {
            return Err(ModelError::NoVb);
        }
        Ok(self
            .params
            .iter()
            .filter(|p| p.role == Role::PreBottleneck)
            .map(|p| p.layer)
            .collect())
    }

    pub fn role_of(&self, layer: usize) -> Role {
        self.layers[layer].role
    }

    pub fn param(&self, layer: usize, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.layer == layer && p.name == name)
            .map(|p| &p.value)
    }

    /// Layer id of the classification head.
    pub fn head_layer(&self) -> usize {
        self.layers.len() - 1
    }
}
