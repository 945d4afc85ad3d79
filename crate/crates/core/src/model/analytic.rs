//! Closed-form leakage from fully connected layers.

use super::{ModelError, ModelGraph, Result};
use crate::grads::NamedGradients;
use crate::tensor::Tensor;

/// Recovers the input of an affine layer from its weight and bias gradients
/// for a batch of one.
///
/// With `y = x @ w + b`, column `i` of `dL/dw` equals `x * dL/db[i]`. The
/// column with the largest `|dL/db[i]|` is used.
pub fn analytic_fc_input(grad_w: &Tensor, grad_b: Option<&Tensor>) -> Result<Tensor> {
    let grad_b = grad_b.ok_or(ModelError::BiasDefenseActive)?;
    let (rows, cols) = grad_w.dims2()?;
    if grad_b.len() != cols {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "analytic_fc_input",
            lhs: grad_w.shape().to_vec(),
            rhs: grad_b.shape().to_vec(),
        }
        .into());
    }
    let (best, pivot) = grad_b
        .data()
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0f64), |acc, (i, v)| if v.abs() > acc.1.abs() { (i, v) } else { acc });
    if pivot.abs() <= 1e-12 {
        return Err(ModelError::NotReconstructible);
    }
    let x = (0..rows).map(|r| grad_w.data()[r * cols + best] / pivot).collect();
    Ok(Tensor::vector(x))
}

/// [`analytic_fc_input`] applied to one layer of an observed gradient.
pub fn analytic_fc_input_for_layer(model: &ModelGraph, grads: &NamedGradients, layer: usize) -> Result<Tensor> {
    if !model.layers.get(layer).is_some_and(|l| l.bias || model.param(layer, "weight").is_some()) {
        return Err(ModelError::Invalid(format!("layer {layer} is not an affine layer")));
    }
    let w = grads
        .get(layer, "weight")
        .ok_or_else(|| ModelError::Invalid(format!("no weight gradient for layer {layer}")))?;
    analytic_fc_input(w, grads.get(layer, "bias"))
}

/// Reads the label of a single sample off the head weight gradient.
///
/// For one sample the head gradient is `h (p - onehot(y))^T`: every class
/// column is a multiple of the same vector `h`, and only the true class has a
/// negative coefficient. The true column is therefore the unique one whose
/// inner product with every other column is negative.
pub fn analytic_label(head_grad_w: &Tensor, batch_size: usize) -> Result<usize> {
    if batch_size != 1 {
        return Err(ModelError::Ambiguous);
    }
    let (rows, classes) = head_grad_w.dims2()?;
    let col = |c: usize| (0..rows).map(move |r| head_grad_w.data()[r * classes + c]);
    let dot = |a: usize, b: usize| col(a).zip(col(b)).map(|(x, y)| x * y).sum::<f64>();
    let opposed: Vec<usize> = (0..classes)
        .map(|i| (0..classes).filter(|&j| j != i && dot(i, j) < 0.0).count())
        .collect();
    let mut candidates = (0..classes).filter(|&i| classes > 1 && opposed[i] == classes - 1);
    match (candidates.next(), candidates.next()) {
        (Some(label), None) => Ok(label),
        _ => Err(ModelError::Ambiguous),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;

    /// One affine layer with bias, MSE to a fixed target; returns the true
    /// input and the observed gradients.
    fn linear_instance(seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![1, 4], &mut rng);
        let w = Tensor::randn(vec![4, 3], &mut rng);
        let b = Tensor::randn(vec![3], &mut rng);
        let target = Tensor::randn(vec![1, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.var(x.clone());
        let wv = tape.var(w);
        let bv = tape.var(b);
        let tv = tape.var(target);
        let y = tape.affine(xv, wv, Some(bv)).unwrap();
        let d = tape.sub(y, tv).unwrap();
        let l = tape.dot(d, d).unwrap();
        let g = tape.grad_values(l, &[wv, bv]).unwrap();
        (x, g[0].clone(), g[1].clone())
    }

    #[test]
    fn recovers_linear_input() {
        let (x, gw, gb) = linear_instance(4);
        let rec = analytic_fc_input(&gw, Some(&gb)).unwrap();
        for (a, b) in rec.data().iter().zip(x.data()) {
            assert!((a - b).abs() / b.abs().max(1e-12) < 1e-6);
        }
    }

    #[test]
    fn zero_bias_gradient() {
        let gw = Tensor::zeros(vec![4, 3]);
        let gb = Tensor::zeros(vec![3]);
        assert!(matches!(
            analytic_fc_input(&gw, Some(&gb)),
            Err(ModelError::NotReconstructible)
        ));
    }

    #[test]
    fn bias_free_layer() {
        let gw = Tensor::zeros(vec![4, 3]);
        assert!(matches!(analytic_fc_input(&gw, None), Err(ModelError::BiasDefenseActive)));
    }

    #[test]
    fn batch_of_two_is_ambiguous() {
        let g = Tensor::zeros(vec![3, 4]);
        assert!(matches!(analytic_label(&g, 2), Err(ModelError::Ambiguous)));
    }

    #[test]
    fn label_from_rank_one_gradient() {
        // h = [1, -2], p = [0.2, 0.5, 0.3], y = 1
        let h = [1.0, -2.0];
        let coef = [0.2, -0.5, 0.3];
        let data = h.iter().flat_map(|hv| coef.iter().map(move |c| hv * c)).collect();
        let g = Tensor::new(vec![2, 3], data).unwrap();
        assert_eq!(analytic_label(&g, 1).unwrap(), 1);
    }
}
