//! Central finite differences against reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgs::numerics::{Bound, ParamSet, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per tensor when it is larger than this.
const MAX_PROBES: usize = 24;

/// Gradient norm below which the error is measured in absolute terms; a bias
/// feeding a normalization has an exactly zero gradient that differencing
/// only recovers to roundoff.
pub const NORM_FLOOR: f64 = 1e-3;

/// `||a - n|| / max(||a||, ||n||, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn probes(numel: usize, seed: u64) -> Vec<usize> {
    if numel <= MAX_PROBES {
        return (0..numel).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, numel, MAX_PROBES).into_vec();
    idx.sort_unstable();
    idx
}

fn with_entry(t: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] += delta;
    Tensor::new(t.shape(), data).unwrap()
}

/// Worst relative error over every input of a scalar function `f`.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> sgs::Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&tape, &vars).expect("forward");
    assert_eq!(out.value().numel(), 1, "gradient check needs a scalar output");
    let grads = tape.backward(out).expect("backward");
    let eval = |ts: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").item()
    };
    let mut worst: f64 = 0.0;
    for (k, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic_full = grads.get(*var).map_or_else(|| vec![0.0; input.numel()], |g| g.into_data());
        let idx = probes(input.numel(), k as u64);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut plus = inputs.to_vec();
            plus[k] = with_entry(input, i, STEP);
            let mut minus = inputs.to_vec();
            minus[k] = with_entry(input, i, -STEP);
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * STEP));
            analytic.push(analytic_full[i]);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Worst relative error over every parameter tensor of `params`.
pub fn check_params<F>(params: &ParamSet, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> sgs::Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let out = f(&tape, &bound).expect("forward");
    let grads = tape.backward(out).expect("backward");
    let eval = |p: &ParamSet| {
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        f(&tape, &bound).expect("forward").item()
    };
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let mut worst: f64 = 0.0;
    for (k, name) in names.iter().enumerate() {
        let id = params.find(name).unwrap();
        let value = params.get(id).value.clone();
        let analytic_full = grads.get(bound.get(id)).map_or_else(|| vec![0.0; value.numel()], |g| g.into_data());
        let idx = probes(value.numel(), 1000 + k as u64);
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut plus = params.clone();
            plus.get_mut(id).value = with_entry(&value, i, STEP);
            let mut minus = params.clone();
            minus.get_mut(id).value = with_entry(&value, i, -STEP);
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * STEP));
            analytic.push(analytic_full[i]);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
