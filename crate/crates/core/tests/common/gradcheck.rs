//! Central finite-difference checks against the tape's gradients.
//!
//! Each check contracts the output with a random cotangent `r`, so the
//! scalar being differentiated is `r . f(inputs)`. Errors are reported per
//! tensor as `||a - n|| / max(||a||, ||n||, FLOOR)` over the checked
//! coordinates. The floor covers gradients that vanish identically, such as
//! a bias feeding batch norm, where both sides are rounding noise.

#![allow(dead_code)]

use cmask::nn::{Graph, Mode, Tensor, UNet, UNetConfig, Var};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-4;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform in `[-1, 1]` but at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(FLOOR)
}

/// Outcome of one check.
#[derive(Debug, Clone, Copy, Default)]
pub struct Report {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates dropped because a kink lies within the step.
    pub skipped: usize,
}

impl Report {
    pub fn merge(self, other: Report) -> Report {
        Report {
            worst: self.worst.max(other.worst),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

/// Compares `analytic[i]` with central differences of `loss_at(i, delta)`,
/// the loss with coordinate `i` shifted by `delta`. With `kinks` set, a
/// coordinate whose difference quotient changes between step sizes `h` and
/// `h / 4` is treated as straddling a kink and skipped.
pub fn compare(
    analytic: &[f64],
    coords: &[usize],
    kinks: bool,
    mut loss_at: impl FnMut(usize, f64) -> f64,
) -> Report {
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut skipped = 0;
    for &i in coords {
        let quotient =
            |h: f64, f: &mut dyn FnMut(usize, f64) -> f64| (f(i, h) - f(i, -h)) / (2.0 * h);
        let coarse = quotient(STEP, &mut loss_at);
        if kinks {
            let fine = quotient(STEP / 4.0, &mut loss_at);
            if (coarse - fine).abs() > 1e-6 * (coarse.abs() + fine.abs()) + 1e-9 {
                skipped += 1;
                continue;
            }
        }
        a.push(analytic[i]);
        n.push(coarse);
    }
    Report {
        worst: rel_error(&a, &n),
        checked: a.len(),
        skipped,
    }
}

/// Up to `limit` distinct coordinates out of `len`, in random order.
pub fn pick(rng: &mut ChaCha8Rng, len: usize, limit: usize) -> Vec<usize> {
    sample(rng, len, len.min(limit)).into_vec()
}

/// Checks every input of a graph op. `build` adds the op to a fresh graph
/// whose leaves are the current `inputs`.
pub fn check_graph_op(
    rng: &mut ChaCha8Rng,
    mut inputs: Vec<Tensor<f64>>,
    kinks: bool,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Report {
    let run = |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_grad()))
            .collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (mut g, vars, out) = run(&inputs);
    let r: Vec<f64> = (0..g.value(out).numel())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    g.backward(out, r.clone()).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let mut report = Report::default();
    for t in 0..inputs.len() {
        let coords: Vec<usize> = (0..inputs[t].numel()).collect();
        let part = compare(&analytic[t], &coords, kinks, |i, d| {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + d;
            let (g, _, out) = run(&inputs);
            inputs[t].data_mut()[i] = orig;
            dot(&r, g.value(out).data())
        });
        report = report.merge(part);
    }
    report
}

/// Checks a depth-2 U-Net in train mode (batch statistics, a fixed dropout
/// mask) w.r.t. its input and all parameters, at up to `per_tensor`
/// coordinates of each.
pub fn check_unet(rng: &mut ChaCha8Rng, seed: u64, per_tensor: usize) -> Report {
    let channels = vec![rng.gen_range(2..4), rng.gen_range(2..5)];
    let io = rng.gen_range(1..3);
    let mut net = UNet::<f64>::new(UNetConfig::new(channels, io, seed)).unwrap();
    let batch = rng.gen_range(1..3);
    // at least two values per channel reach the bottleneck batch norm
    let h = 8;
    let w = 4 * rng.gen_range(1..3);
    let mut input = uniform(rng, &[batch, io, h, w]);
    let stream = rng.gen::<u64>();

    let run = |net: &mut UNet<f64>, input: &Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.leaf(input.clone().with_grad());
        let pass = net.forward(&mut g, x, Mode::Train, stream).unwrap();
        (g, x, pass)
    };
    let (mut g, x, pass) = run(&mut net, &input);
    let r: Vec<f64> = (0..g.value(pass.output).numel())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    g.backward(pass.output, r.clone()).unwrap();
    let grad_of = |v: Var, n: usize| g.grad(v).map_or(vec![0.0; n], <[f64]>::to_vec);

    let coords = pick(rng, input.numel(), per_tensor);
    let mut report = compare(&grad_of(x, input.numel()), &coords, true, |i, d| {
        let orig = input.data()[i];
        input.data_mut()[i] = orig + d;
        let (g, _, pass) = run(&mut net, &input);
        input.data_mut()[i] = orig;
        dot(&r, g.value(pass.output).data())
    });

    for (p, &var) in pass.params.iter().enumerate() {
        let numel = net.parameters_mut()[p].numel();
        let analytic = grad_of(var, numel);
        let coords = pick(rng, numel, per_tensor);
        let part = compare(&analytic, &coords, true, |i, d| {
            let orig = net.parameters_mut()[p].data()[i];
            net.parameters_mut()[p].data_mut()[i] = orig + d;
            let (g, _, pass) = run(&mut net, &input);
            net.parameters_mut()[p].data_mut()[i] = orig;
            dot(&r, g.value(pass.output).data())
        });
        report = report.merge(part);
    }
    report
}
