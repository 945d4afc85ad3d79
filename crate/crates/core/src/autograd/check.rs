use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Which parameter coordinates a finite-difference check visits.
#[derive(Clone, Copy, Debug)]
pub enum FdProbes {
    All,
    /// `count` coordinates drawn uniformly (without replacement) over the
    /// flattened parameter list.
    Random { count: usize, seed: u64 },
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` builds a scalar on a fresh tape from leaves holding `params`. Returns
/// the maximum over visited coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], h: f64, probes: FdProbes) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid(format!("step must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.var(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite { op: "finite difference evaluation" })
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let analytic = tape.grad_values(out, &vars)?;

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let coords: Vec<usize> = match probes {
        FdProbes::All => (0..total).collect(),
        FdProbes::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, total, count.min(total)).into_vec();
            picked.sort_unstable();
            picked
        }
    };

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for flat in coords {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[which];
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + h;
        let up = eval(&work)?;
        work[which].data_mut()[idx] = orig - h;
        let down = eval(&work)?;
        work[which].data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[which].data()[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
