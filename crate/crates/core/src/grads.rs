//! Per-parameter gradient lists, in model parameter order.

use std::collections::BTreeSet;

use crate::model::{ModelGraph, Role};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedGradient {
    pub layer: usize,
    pub name: String,
    pub role: Role,
    pub grad: Tensor,
}

/// One gradient tensor per model parameter, ordered like
/// [`ModelGraph::params`].
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NamedGradients(pub Vec<NamedGradient>);

impl NamedGradients {
    pub fn from_model(model: &ModelGraph, grads: Vec<Tensor>) -> Self {
        debug_assert_eq!(model.params.len(), grads.len());
        Self(
            model
                .params
                .iter()
                .zip(grads)
                .map(|(p, g)| NamedGradient {
                    layer: p.layer,
                    name: p.name.clone(),
                    role: p.role,
                    grad: g,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, NamedGradient> {
        self.0.iter()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.0.iter().map(|g| g.layer).collect()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.0.iter().map(|g| g.grad.clone()).collect()
    }

    pub fn get(&self, layer: usize, name: &str) -> Option<&Tensor> {
        self.0
            .iter()
            .find(|g| g.layer == layer && g.name == name)
            .map(|g| &g.grad)
    }

    /// Same layers, names and shapes.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| {
                a.layer == b.layer && a.name == b.name && a.grad.shape() == b.grad.shape()
            })
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(|g| g.grad.dot(&g.grad)).sum::<f64>().sqrt()
    }
}

impl<'a> IntoIterator for &'a NamedGradients {
    type Item = &'a NamedGradient;
    type IntoIter = std::slice::Iter<'a, NamedGradient>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}
