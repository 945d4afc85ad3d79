//! Gradient inversion: optimize a dummy input until its gradient matches an
//! observed one.

mod distance;
mod trace;

use std::collections::BTreeSet;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::grads::NamedGradients;
use crate::model::{BnMode, ModelError, ModelGraph, Sampling};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Tensor, TensorError};

pub use distance::{
    cosine_distance, cosine_on_tape, euclidean_distance, euclidean_on_tape, targeted_layer_selection,
    total_variation, total_variation_on_tape,
};
pub use trace::{grad_diagnostics, AttackTrace, LayerDiagnostics, Termination};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("gradient norm is zero; cosine distance is undefined")]
    DegenerateGradient,
    #[error("gradient layers do not match: {0}")]
    LayerMismatch(String),
    #[error("targeted selection needs a model with a variational bottleneck")]
    NoVb,
    #[error("attack loss became non-finite after {} iterations", .trace.iterations)]
    NonFinite { trace: Box<AttackTrace> },
    #[error("invalid attack spec: {0}")]
    Spec(String),
    #[error("empty trace")]
    EmptyTrace,
    #[error("trace series have inconsistent lengths")]
    TraceShape,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = AttackError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// [`LayerSelection::PreBottleneck`] on models with a variational
    /// bottleneck, [`LayerSelection::All`] otherwise.
    #[default]
    Auto,
    All,
    /// Only layers before the variational bottleneck.
    PreBottleneck,
}

impl LayerSelection {
    /// The concrete selection used against `model`.
    pub fn resolve(self, model: &ModelGraph) -> Self {
        match self {
            Self::Auto if model.has_vb() => Self::PreBottleneck,
            Self::Auto => Self::All,
            other => other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Auto => "auto",
            Self::All => "all",
            Self::PreBottleneck => "pre_bottleneck",
        }
    }
}

/// How the total-variation prior reduces absolute pixel differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvReduction {
    /// Mean per direction, so the weight does not depend on image size.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub distance: Distance,
    /// Weight of the total-variation prior on the dummy image.
    pub tv_weight: f64,
    pub tv_reduction: TvReduction,
    pub lr: f64,
    /// Iterations without a new best loss before the learning rate decays.
    pub plateau_window: usize,
    pub plateau_factor: f64,
    pub stop_loss: f64,
    /// Iterations without a new best loss before giving up.
    pub stall_limit: usize,
    pub max_iters: usize,
    pub selection: LayerSelection,
    /// Class of the victim sample, assumed known.
    pub label: usize,
    pub bn: BnMode,
    /// Pixel mean and standard deviation of the data, `(0, 1)` when unset.
    /// The dummy is optimized in standardized coordinates
    /// `z = (x - mean) / std`: it starts at `z ~ N(0, 1)`, Adam steps and the
    /// TV prior act on `z`.
    pub normalization: Option<(f64, f64)>,
    /// Project the dummy back into the pixel range `[0, 1]` after every step.
    pub boxed: bool,
    /// A loss counts as a new best when it is below `best * (1 - improvement)`.
    pub improvement: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            distance: Distance::Cosine,
            tv_weight: 0.01,
            tv_reduction: TvReduction::Mean,
            lr: 0.1,
            plateau_window: 800,
            plateau_factor: 0.1,
            stop_loss: 1e-5,
            stall_limit: 4000,
            max_iters: 20_000,
            selection: LayerSelection::Auto,
            label: 0,
            bn: BnMode::Batch,
            normalization: None,
            boxed: true,
            improvement: 1e-4,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AttackError::Spec(m.into()));
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return bad("tv_weight must be non-negative");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.stop_loss > 0.0) {
            return bad("stop_loss must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        let (mean, std) = self.standardization();
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return bad("normalization std must be positive");
        }
        if !(0.0..1.0).contains(&self.improvement) {
            return bad("improvement must lie in [0, 1)");
        }
        if self.max_iters == 0 || self.plateau_window == 0 || self.stall_limit == 0 {
            return bad("iteration limits must be positive");
        }
        Ok(())
    }

    pub fn standardization(&self) -> (f64, f64) {
        self.normalization.unwrap_or((0.0, 1.0))
    }

    pub fn layers(&self, model: &ModelGraph) -> Result<BTreeSet<usize>> {
        match self.selection.resolve(model) {
            LayerSelection::PreBottleneck => targeted_layer_selection(model),
            _ => Ok(model.param_layers()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Final dummy image clamped to `[0, 1]`.
    pub image: Tensor,
    /// Final dummy image as optimized.
    pub raw: Tensor,
    pub final_loss: f64,
    pub trace: AttackTrace,
}

impl AttackResult {
    pub fn termination(&self) -> Termination {
        self.trace.termination.unwrap_or(Termination::MaxIters)
    }
}

struct Step {
    loss: f64,
    distance: f64,
    grad: Tensor,
    norms: Vec<f64>,
    cosines: Vec<f64>,
}

/// One evaluation of the attack objective at the standardized dummy `z` and
/// its gradient with respect to `z`, taken through the dummy gradient.
fn objective(
    model: &ModelGraph,
    victim: &NamedGradients,
    z: &Tensor,
    spec: &AttackSpec,
    selection: &BTreeSet<usize>,
    layers: &[usize],
    rng: &mut dyn RngCore,
) -> Result<Step> {
    let mut tape = Tape::new();
    let zv = tape.var(z.clone());
    let (mean, std) = spec.standardization();
    let scaled = tape.scale(zv, std)?;
    let xv = tape.add_scalar(scaled, mean)?;
    let params = model.param_leaves(&mut tape);
    let pass = model.forward_on_tape(&mut tape, xv, &params, &mut Sampling::Stochastic(rng), spec.bn)?;
    let loss = model.loss_on_tape(&mut tape, &pass, &[spec.label])?;
    let dummy = tape.grad(loss, &params)?;

    let distance = match spec.distance {
        Distance::Euclidean => euclidean_on_tape(&mut tape, victim, &dummy, selection)?,
        Distance::Cosine => cosine_on_tape(&mut tape, victim, &dummy, selection)?,
    };
    let total = if spec.tv_weight > 0.0 {
        let tv = total_variation_on_tape(&mut tape, zv, spec.tv_reduction == TvReduction::Mean)?;
        let weighted = tape.scale(tv, spec.tv_weight)?;
        tape.add(distance, weighted)?
    } else {
        distance
    };
    let grad = tape.grad_values(total, &[zv])?.remove(0);

    let mut norms = Vec::with_capacity(layers.len());
    let mut cosines = Vec::with_capacity(layers.len());
    for &layer in layers {
        let (v, d): (Vec<&Tensor>, Vec<&Tensor>) = victim
            .iter()
            .zip(&dummy)
            .filter(|(g, _)| g.layer == layer)
            .map(|(g, d)| (&g.grad, tape.value(*d)))
            .unzip();
        norms.push(d.iter().map(|t| t.dot(t)).sum::<f64>().sqrt());
        cosines.push(distance::cosine_similarity(&v, &d));
    }
    Ok(Step {
        loss: tape.value(total).item(),
        distance: tape.value(distance).item(),
        grad,
        norms,
        cosines,
    })
}

/// Reconstructs an input of `image_shape` whose gradient on `model`
/// matches `victim`.
///
/// The standardized dummy starts from `N(0, 1)` drawn from `rng`; the same stream drives
/// bottleneck sampling. Every iteration evaluates the objective at the
/// current dummy, records it, checks the stopping rules and then takes one
/// Adam step.
pub fn run_attack(
    model: &ModelGraph,
    victim: &NamedGradients,
    image_shape: &[usize],
    spec: &AttackSpec,
    rng: &mut dyn RngCore,
) -> Result<AttackResult> {
    spec.validate()?;
    let expected = NamedGradients::from_model(model, model.param_values());
    if !victim.same_structure(&expected) {
        return Err(AttackError::LayerMismatch(
            "victim gradient does not match the model parameters".into(),
        ));
    }
    let selection = spec.layers(model)?;
    let layers: Vec<usize> = model.param_layers().into_iter().collect();

    let mut shape = image_shape.to_vec();
    if shape.len() == 3 {
        shape.insert(0, 1);
    }
    let mut z = Tensor::randn(shape, rng);
    let (mean, std) = spec.standardization();
    let (lo, hi) = (-mean / std, (1.0 - mean) / std);
    let mut adam = AdamState::new(AdamConfig::with_lr(spec.lr), [&z]);
    let mut trace = AttackTrace::new(layers.clone());
    let mut best = f64::INFINITY;
    let mut since_decay = 0usize;
    let mut since_best = 0usize;

    let termination = loop {
        let step = match objective(model, victim, &z, spec, &selection, &layers, rng) {
            Ok(s) if s.loss.is_finite() => s,
            Ok(_) | Err(AttackError::Tensor(TensorError::NonFinite { .. })) => {
                trace.termination = None;
                return Err(AttackError::NonFinite { trace: Box::new(trace) });
            }
            Err(e) => return Err(e),
        };
        trace.push(step.loss, step.norms, step.cosines);

        if step.distance < spec.stop_loss {
            break Termination::Converged;
        }
        if step.loss < best * (1.0 - spec.improvement) {
            best = step.loss;
            since_decay = 0;
            since_best = 0;
        } else {
            since_decay += 1;
            since_best += 1;
        }
        if since_best >= spec.stall_limit {
            break Termination::Stalled;
        }
        if trace.iterations >= spec.max_iters {
            break Termination::MaxIters;
        }
        if since_decay >= spec.plateau_window {
            let lr = adam.lr() * spec.plateau_factor;
            adam.set_lr(lr);
            since_decay = 0;
        }
        adam.step(&mut [&mut z], &[step.grad])?;
        if spec.boxed {
            z = z.clamp(lo, hi);
        }
    };
    trace.termination = Some(termination);
    let x = z.map(|v| mean + std * v);
    let final_loss = *trace.loss.last().expect("at least one iteration");
    log::debug!(
        "attack finished after {} iterations ({}), loss {final_loss:e}",
        trace.iterations,
        termination.as_str()
    );
    Ok(AttackResult {
        image: x.clamp(0.0, 1.0),
        raw: x,
        final_loss,
        trace,
    })
}
