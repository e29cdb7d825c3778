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

/// Random linear functional of `x`, so every output entry carries gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(random_tensor(&mut rng(seed), &shape, 1.0));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

/// Worst relative error between tape gradients of `f` and central
/// differences with step `h`; magnitudes below `floor` are compared against
/// `floor`.
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
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe);
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe);
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    worst
}

/// Outcome of one criterion.
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn check(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }

    /// Combines sub-checks; the verdict passes only if all of them do.
    pub fn all(parts: Vec<(bool, String)>) -> Self {
        let pass = parts.iter().all(|(p, _)| *p);
        let detail = parts
            .iter()
            .map(|(p, d)| if *p { d.clone() } else { format!("FAILED {d}") })
            .collect::<Vec<_>>()
            .join("; ");
        Verdict { pass, detail }
    }
}
