//! Finite-difference helpers for unit tests. Independent of any backward code:
//! only forward values are read.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};

pub fn rand_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-1.0..1.0)))
}

/// Relative comparison with an absolute floor.
pub fn close(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= atol || diff <= rtol * analytic.abs().max(numeric.abs())
}

/// Checks every input gradient of `f` against central differences of the
/// projected loss `sum(r * f(inputs))` with a fixed random `r`.
pub fn check_input_grad<F>(inputs: &[Tensor<f64>], f: F, rtol: f64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eps = 1e-4;
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars);
        rand_tensor::<f64>(tape.value(y).shape(), 99)
    };
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars);
        tape.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(&mut tape, &vars);
    let r = tape.constant(probe.clone());
    let prod = tape.mul(y, r).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).expect("input gradient");
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                close(a, numeric, rtol, 1e-7),
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
