//! Gradients of gradients: the derivative of a gradient-matching loss with
//! respect to the input, checked against finite differences.

use gradleak::autograd::{finite_difference_check, FdProbes, Tape};
use gradleak::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::randn(vec![4, 3], &mut rng);
    let x = Tensor::randn(vec![1, 4], &mut rng);
    let target = Tensor::randn(vec![4, 3], &mut rng);

    // loss(x) = || d/dw sum((x w)^2) - target ||^2
    let matching = |tape: &mut Tape, vs: &[gradleak::autograd::Var]| {
        let wv = tape.var(w.clone());
        let y = tape.matmul(vs[0], wv)?;
        let sq = tape.square(y)?;
        let inner = tape.sum(sq)?;
        let gw = tape.grad(inner, &[wv])?[0];
        let t = tape.var(target.clone());
        let diff = tape.sub(gw, t)?;
        let sq = tape.square(diff)?;
        tape.sum(sq)
    };

    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let out = matching(&mut tape, &[xv])?;
    let dx = tape.grad_values(out, &[xv])?;
    println!("loss       {:.6}", tape.value(out).item());
    println!("d loss/dx  {:?}", dx[0].data());

    let err = finite_difference_check(matching, &[x], 1e-5, FdProbes::All)?;
    println!("max relative error against central differences: {err:.2e}");
    Ok(())
}
