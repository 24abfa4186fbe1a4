#![allow(dead_code)]

use forchestra::nn::{Parameter, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so that near-zero gradients are compared on
/// an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares tape gradients of a scalar loss with central differences for
/// every element of every parameter. Returns the worst relative error.
pub fn max_fd_error(
    params: &mut [&mut Parameter],
    build: &dyn Fn(&mut Tape, &[&Parameter]) -> Var,
) -> f64 {
    let analytic: Vec<Vec<f64>> = {
        let views: Vec<&Parameter> = params.iter().map(|p| &**p).collect();
        let mut tape = Tape::new();
        let loss = build(&mut tape, &views);
        let grads = tape.backward(loss).unwrap();
        views
            .iter()
            .map(|p| {
                grads
                    .for_param(p.id())
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; p.len()])
            })
            .collect()
    };
    let eval = |params: &[&mut Parameter]| {
        let views: Vec<&Parameter> = params.iter().map(|p| &**p).collect();
        let mut tape = Tape::new();
        let loss = build(&mut tape, &views);
        tape.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    for pi in 0..params.len() {
        for e in 0..params[pi].len() {
            let orig = params[pi].value().data()[e];
            params[pi].value_mut().data_mut()[e] = orig + FD_STEP;
            let up = eval(params);
            params[pi].value_mut().data_mut()[e] = orig - FD_STEP;
            let down = eval(params);
            params[pi].value_mut().data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[pi][e], numeric));
        }
    }
    worst
}

/// Finite-difference check over every `stride`-th scalar of every parameter
/// of `module`. `loss` rebuilds the forward pass from the module's current
/// values. Returns the worst relative error.
pub fn module_fd_error<M: forchestra::nn::Module>(
    module: &mut M,
    stride: usize,
    loss: &dyn Fn(&M, &mut Tape) -> Var,
) -> f64 {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let l = loss(module, &mut tape);
        let grads = tape.backward(l).unwrap();
        module
            .params()
            .iter()
            .map(|p| {
                grads
                    .for_param(p.id())
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; p.len()])
            })
            .collect()
    };
    let eval = |m: &M| {
        let mut tape = Tape::new();
        let l = loss(m, &mut tape);
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let n_params = analytic.len();
    for pi in 0..n_params {
        let len = analytic[pi].len();
        let mut e = pi % stride.max(1);
        while e < len {
            let orig = module.params()[pi].value().data()[e];
            module.params_mut()[pi].value_mut().data_mut()[e] = orig + FD_STEP;
            let up = eval(module);
            module.params_mut()[pi].value_mut().data_mut()[e] = orig - FD_STEP;
            let down = eval(module);
            module.params_mut()[pi].value_mut().data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[pi][e], numeric));
            e += stride.max(1);
        }
    }
    worst
}
