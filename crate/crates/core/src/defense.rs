//! Perturbations applied to exchanged gradients before they leave a client.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grads::NamedGradients;
use crate::model::ModelGraph;

#[derive(Debug, Error, PartialEq)]
pub enum DefenseError {
    #[error("noise scale must be finite and non-negative, got {0}")]
    Sigma(f64),
    #[error("pruning ratio must lie in [0, 1), got {0}")]
    Ratio(f64),
    #[error("partial perturbation needs a model with a variational bottleneck")]
    NoVb,
    #[error("partial perturbation wraps noise or pruning, not {0}")]
    Inner(String),
}

pub type Result<T, E = DefenseError> = std::result::Result<T, E>;

/// What a client does to its update before sending it.
///
/// Serialized as `{"kind": "ng", "sigma": 0.01}`,
/// `{"kind": "ppp", "inner": {"kind": "gc", "p": 0.9}}` and so on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefensePolicy {
    #[default]
    None,
    /// Additive `N(0, sigma^2)` noise on every layer.
    Ng { sigma: f64 },
    /// Per-layer magnitude pruning of the `floor(p * len)` smallest entries.
    Gc { p: f64 },
    /// Variational bottleneck in the model; gradients pass unchanged.
    Precode,
    /// Bottleneck model plus `inner` applied to the layers before it only.
    Ppp { inner: Box<DefensePolicy> },
}

impl DefensePolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::None | Self::Precode => Ok(()),
            Self::Ng { sigma } => {
                if sigma.is_finite() && *sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(DefenseError::Sigma(*sigma))
                }
            }
            Self::Gc { p } => {
                if (0.0..1.0).contains(p) {
                    Ok(())
                } else {
                    Err(DefenseError::Ratio(*p))
                }
            }
            Self::Ppp { inner } => match **inner {
                Self::Ng { .. } | Self::Gc { .. } => inner.validate(),
                ref other => Err(DefenseError::Inner(other.to_string())),
            },
        }
    }

    /// Whether the defended model carries a variational bottleneck.
    pub fn needs_vb(&self) -> bool {
        matches!(self, Self::Precode | Self::Ppp { .. })
    }
}

impl fmt::Display for DefensePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::Ng { sigma } => write!(f, "ng({sigma})"),
            Self::Gc { p } => write!(f, "gc({p})"),
            Self::Precode => write!(f, "precode"),
            Self::Ppp { inner } => write!(f, "ppp({inner})"),
        }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every layer in `mask`.
pub fn gaussian_perturb(
    grads: &NamedGradients,
    sigma: f64,
    rng: &mut dyn RngCore,
    mask: &BTreeSet<usize>,
) -> Result<NamedGradients> {
    DefensePolicy::Ng { sigma }.validate()?;
    let mut out = grads.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for g in out.0.iter_mut().filter(|g| mask.contains(&g.layer)) {
        for v in g.grad.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(out)
}

/// Zeroes the `floor(p * len)` smallest-magnitude entries of each tensor in
/// a masked layer. Among equal magnitudes the lower flat index goes first.
pub fn compress_prune(grads: &NamedGradients, p: f64, mask: &BTreeSet<usize>) -> Result<NamedGradients> {
    DefensePolicy::Gc { p }.validate()?;
    let mut out = grads.clone();
    for g in out.0.iter_mut().filter(|g| mask.contains(&g.layer)) {
        let data = g.grad.data_mut();
        let count = (p * data.len() as f64).floor() as usize;
        if count == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        // Stable sort keeps index order among ties.
        order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()));
        for &i in &order[..count] {
            data[i] = 0.0;
        }
    }
    Ok(out)
}

/// Layers whose gradients partial perturbation touches: everything before
/// the bottleneck.
pub fn ppp_mask(model: &ModelGraph) -> Result<BTreeSet<usize>> {
    model.pre_bottleneck_layers().map_err(|_| DefenseError::NoVb)
}

pub fn apply_defense(
    policy: &DefensePolicy,
    model: &ModelGraph,
    grads: &NamedGradients,
    rng: &mut dyn RngCore,
) -> Result<NamedGradients> {
    policy.validate()?;
    if policy.needs_vb() && !model.has_vb() {
        return Err(DefenseError::NoVb);
    }
    let all = grads.layers();
    match policy {
        DefensePolicy::None | DefensePolicy::Precode => Ok(grads.clone()),
        DefensePolicy::Ng { sigma } => gaussian_perturb(grads, *sigma, rng, &all),
        DefensePolicy::Gc { p } => compress_prune(grads, *p, &all),
        DefensePolicy::Ppp { inner } => {
            let mask = ppp_mask(model)?;
            match **inner {
                DefensePolicy::Ng { sigma } => gaussian_perturb(grads, sigma, rng, &mask),
                DefensePolicy::Gc { p } => compress_prune(grads, p, &mask),
                _ => unreachable!("validated above"),
            }
        }
    }
}
