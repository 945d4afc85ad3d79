//! Gradient leakage experiments on small fully connected classifiers.
//!
//! The crate covers gradient inversion attacks, a variational-bottleneck
//! model extension and its targeted attack, gradient perturbation defenses,
//! a deterministic federated simulator and reconstruction metrics, all on a
//! small reverse-mode differentiation engine that supports gradients of
//! gradients.

pub mod attack;
pub mod autograd;
pub mod data;
pub mod defense;
pub mod federated;
pub mod grads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod tensor;
