#![allow(dead_code)]

use rand::Rng;
use sta_core::rng::{from_seed, SimRng};
use sta_core::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> SimRng {
    from_seed(seed)
}

pub fn random_tensor(rng: &mut SimRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst elementwise relative error between the tape gradient of `f` and a
/// central difference with step `h`. Gradients below `floor` in magnitude are
/// compared against `floor`.
pub fn gradient_error<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or(vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();
    let eval = |probe: &[Tensor]| {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe);
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe);
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// A scalar readout that weights every output entry differently.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let shape = tape.shape(x).to_vec();
    let w = random_tensor(&mut r, &shape, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}
