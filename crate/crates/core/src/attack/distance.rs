use std::collections::BTreeSet;

use super::{AttackError, Result};
use crate::autograd::{Tape, Var};
use crate::grads::NamedGradients;
use crate::model::ModelGraph;
use crate::tensor::Tensor;

const NORM_FLOOR: f64 = 1e-12;

/// Layers the targeted attack matches: those before the bottleneck.
pub fn targeted_layer_selection(model: &ModelGraph) -> Result<BTreeSet<usize>> {
    model.pre_bottleneck_layers().map_err(|_| AttackError::NoVb)
}

/// Pairs of (victim value, dummy node) for the selected layers, in model order.
fn selected<'a>(
    victim: &'a NamedGradients,
    dummy: &[Var],
    selection: &BTreeSet<usize>,
) -> Result<Vec<(&'a Tensor, Var)>> {
    if victim.len() != dummy.len() {
        return Err(AttackError::LayerMismatch(format!(
            "{} victim tensors, {} dummy tensors",
            victim.len(),
            dummy.len()
        )));
    }
    let present = victim.layers();
    if let Some(missing) = selection.iter().find(|l| !present.contains(l)) {
        return Err(AttackError::LayerMismatch(format!("selected layer {missing} has no gradient")));
    }
    Ok(victim
        .iter()
        .zip(dummy)
        .filter(|(g, _)| selection.contains(&g.layer))
        .map(|(g, d)| (&g.grad, *d))
        .collect())
}

/// Sum over selected layers of squared differences, recorded on `tape`.
pub fn euclidean_on_tape(
    tape: &mut Tape,
    victim: &NamedGradients,
    dummy: &[Var],
    selection: &BTreeSet<usize>,
) -> Result<Var> {
    let mut total = tape.scalar(0.0);
    for (v, d) in selected(victim, dummy, selection)? {
        let c = tape.var(v.clone());
        let diff = tape.sub(d, c)?;
        let sq = tape.dot(diff, diff)?;
        total = tape.add(total, sq)?;
    }
    Ok(total)
}

/// `1 - <g, g'> / (|g| |g'|)` over the concatenation of the selected layers,
/// recorded on `tape`.
pub fn cosine_on_tape(
    tape: &mut Tape,
    victim: &NamedGradients,
    dummy: &[Var],
    selection: &BTreeSet<usize>,
) -> Result<Var> {
    let pairs = selected(victim, dummy, selection)?;
    let victim_norm = pairs.iter().map(|(v, _)| v.dot(v)).sum::<f64>().sqrt();
    let mut inner = tape.scalar(0.0);
    let mut sq = tape.scalar(0.0);
    for (v, d) in pairs {
        let c = tape.var(v.clone());
        let p = tape.dot(c, d)?;
        inner = tape.add(inner, p)?;
        let n = tape.dot(d, d)?;
        sq = tape.add(sq, n)?;
    }
    let dummy_norm = tape.value(sq).item().sqrt();
    if victim_norm <= NORM_FLOOR || dummy_norm <= NORM_FLOOR {
        return Err(AttackError::DegenerateGradient);
    }
    let norm = tape.sqrt(sq)?;
    let denom = tape.scale(norm, victim_norm)?;
    let cos = tape.div(inner, denom)?;
    let neg = tape.neg(cos)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// Anisotropic total variation of a `[.., h, w]` image, recorded on `tape`.
///
/// With `mean` set, each direction contributes the mean rather than the sum
/// of its absolute differences.
pub fn total_variation_on_tape(tape: &mut Tape, x: Var, mean: bool) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(AttackError::Spec(format!("image needs spatial dims, got {shape:?}")));
    }
    let mut total = tape.scalar(0.0);
    for axis in [shape.len() - 2, shape.len() - 1] {
        let n = shape[axis];
        if n < 2 {
            continue;
        }
        let hi = tape.slice(x, axis, 1, n)?;
        let lo = tape.slice(x, axis, 0, n - 1)?;
        let d = tape.sub(hi, lo)?;
        let a = tape.abs(d)?;
        let s = if mean { tape.mean(a)? } else { tape.sum(a)? };
        total = tape.add(total, s)?;
    }
    Ok(total)
}

fn leaves(tape: &mut Tape, g: &NamedGradients) -> Vec<Var> {
    g.iter().map(|n| tape.var(n.grad.clone())).collect()
}

pub fn euclidean_distance(a: &NamedGradients, b: &NamedGradients, selection: &BTreeSet<usize>) -> Result<f64> {
    check_pair(a, b)?;
    let mut tape = Tape::new();
    let d = leaves(&mut tape, b);
    let out = euclidean_on_tape(&mut tape, a, &d, selection)?;
    Ok(tape.value(out).item())
}

pub fn cosine_distance(a: &NamedGradients, b: &NamedGradients, selection: &BTreeSet<usize>) -> Result<f64> {
    check_pair(a, b)?;
    let mut tape = Tape::new();
    let d = leaves(&mut tape, b);
    let out = cosine_on_tape(&mut tape, a, &d, selection)?;
    Ok(tape.value(out).item())
}

pub fn total_variation(x: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.var(x.clone());
    let out = total_variation_on_tape(&mut tape, v, false)?;
    Ok(tape.value(out).item())
}

fn check_pair(a: &NamedGradients, b: &NamedGradients) -> Result<()> {
    if a.same_structure(b) {
        Ok(())
    } else {
        Err(AttackError::LayerMismatch("gradient lists differ in structure".into()))
    }
}

/// Cosine similarity of two flat vectors; 0 when either is zero.
pub(crate) fn cosine_similarity(a: &[&Tensor], b: &[&Tensor]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.dot(y)).sum();
    let na: f64 = a.iter().map(|x| x.dot(x)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.dot(x)).sum::<f64>().sqrt();
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::grads::NamedGradient;
    use crate::model::Role;

    fn grads(layers: &[&[f64]]) -> NamedGradients {
        NamedGradients(
            layers
                .iter()
                .enumerate()
                .map(|(i, v)| NamedGradient {
                    layer: i,
                    name: "weight".into(),
                    role: Role::PreBottleneck,
                    grad: Tensor::vector(v.to_vec()),
                })
                .collect(),
        )
    }

    fn all(g: &NamedGradients) -> BTreeSet<usize> {
        g.layers()
    }

    #[test]
    fn euclidean_examples() {
        let a = grads(&[&[1.0, 2.0], &[3.0]]);
        assert_eq!(euclidean_distance(&a, &a, &all(&a)).unwrap(), 0.0);
        let z = grads(&[&[0.0, 0.0], &[0.0]]);
        assert_eq!(euclidean_distance(&a, &z, &all(&a)).unwrap(), 14.0);
        let one = grads(&[&[1.0, 0.0]]);
        let zero = grads(&[&[0.0, 0.0]]);
        assert_eq!(euclidean_distance(&one, &zero, &all(&one)).unwrap(), 1.0);
    }

    #[test]
    fn cosine_examples() {
        let a = grads(&[&[1.0, 0.0]]);
        let s = all(&a);
        assert!(cosine_distance(&a, &a, &s).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&a, &grads(&[&[0.0, 1.0]]), &s).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&a, &grads(&[&[-1.0, 0.0]]), &s).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_distance(&a, &grads(&[&[0.0, 0.0]]), &s),
            Err(AttackError::DegenerateGradient)
        ));
    }

    #[test]
    fn selection_restricts_layers() {
        let a = grads(&[&[1.0], &[5.0]]);
        let b = grads(&[&[1.0], &[0.0]]);
        assert_eq!(euclidean_distance(&a, &b, &BTreeSet::from([0])).unwrap(), 0.0);
        assert!(matches!(
            euclidean_distance(&a, &b, &BTreeSet::from([7])),
            Err(AttackError::LayerMismatch(_))
        ));
        assert!(euclidean_distance(&a, &grads(&[&[1.0]]), &BTreeSet::from([0])).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(total_variation(&Tensor::full(vec![1, 1, 3, 3], 0.4)).unwrap(), 0.0);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&x).unwrap(), 2.0);
        assert_eq!(total_variation(&Tensor::full(vec![1, 1, 1, 1], 0.3)).unwrap(), 0.0);

        let mut tape = Tape::new();
        let v = tape.var(Tensor::new(vec![1, 1, 2, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let m = total_variation_on_tape(&mut tape, v, true).unwrap();
        // horizontal diffs |1|,|0|,|0|,|0| -> 0.25; vertical |0|,|1|,|1| -> 2/3
        assert!((tape.value(m).item() - (0.25 + 2.0 / 3.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn cosine_ignores_positive_scale(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            c in 1e-3f64..1e3,
        ) {
            prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            prop_assume!(b.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let ga = grads(&[&a[..3], &a[3..]]);
            let gb = grads(&[&b[..3], &b[3..]]);
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            let gc = grads(&[&scaled[..3], &scaled[3..]]);
            let s = all(&ga);
            let d1 = cosine_distance(&ga, &gb, &s).unwrap();
            let d2 = cosine_distance(&gc, &gb, &s).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-10 * d1.abs().max(1.0));
            let d3 = cosine_distance(&gb, &ga, &s).unwrap();
            prop_assert!((d1 - d3).abs() < 1e-12);
        }

        #[test]
        fn tv_is_homogeneous(data in prop::collection::vec(0.0f64..1.0, 12), c in 0.0f64..10.0) {
            let x = Tensor::new(vec![1, 1, 3, 4], data).unwrap();
            let tv = total_variation(&x).unwrap();
            let scaled = total_variation(&x.map(|v| v * c)).unwrap();
            prop_assert!((scaled - c * tv).abs() <= 1e-12 * (1.0 + c * tv));
            prop_assert!(tv >= 0.0);
        }

        #[test]
        fn euclidean_is_zero_on_equal(data in prop::collection::vec(-3.0f64..3.0, 1..10)) {
            let g = grads(&[&data]);
            prop_assert_eq!(euclidean_distance(&g, &g, &all(&g)).unwrap(), 0.0);
        }
    }
}
