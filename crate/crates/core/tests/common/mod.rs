//! Shared test utilities: finite-difference gradient oracle and random
//! tensor helpers.

use ftlab::autodiff::{Tape, Tensor, Var};
use ftlab::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    rng::stream(seed, label)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let numel = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..numel).map(|_| (r.gen::<f64>() - 0.5) * 2.0 * scale).collect(),
    )
    .unwrap()
}

/// Relative error with an absolute floor of 1 in the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Check analytic gradients of a scalar-valued graph against central
/// finite differences. `build` must construct the loss from leaves it
/// creates for the given inputs (in order). Returns the max relative
/// error over every input element.
pub fn finite_diff_max_err<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor]| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone().requires_grad(true)))
            .collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).numel(), 1, "loss must be scalar");
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()))
            .collect();
        (tape.value(loss).item(), grads)
    };

    let (_, grads) = eval(inputs);
    let mut max_err: f64 = 0.0;
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads[ti].as_ref().expect("missing gradient");
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let lp = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = plus.iter().map(|t| tape.leaf(t.clone())).collect();
                let loss = build(&mut tape, &vars);
                tape.value(loss).item()
            };
            let lm = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = minus.iter().map(|t| tape.leaf(t.clone())).collect();
                let loss = build(&mut tape, &vars);
                tape.value(loss).item()
            };
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[ei], numeric));
        }
    }
    max_err
}
