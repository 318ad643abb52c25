#![allow(dead_code)]

use posattn::model::{AttentionKind, ModelConfig, ModelParams};
use posattn::par::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fourth-order central differences of `f` at `x`. A coordinate whose
/// estimate changes when the step shrinks 8x has a ReLU kink inside the
/// stencil, and gets the smaller step.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            let mut stencil = |h: f64| {
                let mut at = |d: f64| {
                    p[i] = orig + d;
                    f(&p)
                };
                (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
            };
            let coarse = stencil(h);
            let fine = stencil(h / 8.0);
            p[i] = orig;
            if (coarse - fine).abs() <= 1e-9 + 1e-7 * coarse.abs() {
                coarse
            } else {
                fine
            }
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn small_config(kind: AttentionKind, n: usize, layers: usize) -> ModelConfig {
    let mut c = ModelConfig::new(n, kind);
    c.num_layers = layers;
    c.d_x = 6;
    c.d_v = 4;
    c.d_o = 6;
    c.mlp_hidden = 6;
    c
}

fn flatten(p: &ModelParams) -> Vec<f64> {
    p.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

fn unflatten(p: &mut ModelParams, flat: &[f64]) {
    let mut off = 0;
    for t in p.tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Worst relative error between analytic and central-difference gradients of
/// the training loss over `points` random parameter draws.
pub fn end_to_end_grad_error(kind: AttentionKind, n: usize, layers: usize, points: usize, seed: u64) -> f64 {
    let config = small_config(kind, n, layers);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..points {
        let mut params = ModelParams::init(&config, seed * 1000 + k as u64).unwrap();
        // Nonzero biases so their gradients are exercised away from init.
        let mut flat = flatten(&params);
        for v in &mut flat {
            *v += rng.gen_range(-0.1..0.1);
        }
        unflatten(&mut params, &flat);
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();

        let (_, g) = params.loss_and_grads(&inputs, &targets, true, Execution::Sequential).unwrap();
        let analytic: Vec<f64> = g.unwrap().concat();
        let numeric = numeric_grad(
            |x| {
                let mut q = params.clone();
                unflatten(&mut q, x);
                q.loss_and_grads(&inputs, &targets, false, Execution::Sequential).unwrap().0
            },
            &flat,
            1e-5,
        );
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Like [`end_to_end_grad_error`] at the default widths, differencing only
/// `coords` randomly chosen parameters per point.
pub fn sampled_grad_error_default_width(
    kind: AttentionKind,
    n: usize,
    layers: usize,
    points: usize,
    coords: usize,
    seed: u64,
) -> f64 {
    let mut config = ModelConfig::new(n, kind);
    config.num_layers = layers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..points {
        let mut params = ModelParams::init(&config, seed * 1000 + k as u64).unwrap();
        let mut flat = flatten(&params);
        for v in &mut flat {
            *v += rng.gen_range(-0.05..0.05);
        }
        unflatten(&mut params, &flat);
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let (_, g) = params.loss_and_grads(&inputs, &targets, true, Execution::Sequential).unwrap();
        let analytic: Vec<f64> = g.unwrap().concat();

        let idx = rand::seq::index::sample(&mut rng, flat.len(), coords).into_vec();
        let sub: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
        let numeric = numeric_grad(
            |x| {
                let mut full = flat.clone();
                for (&i, &v) in idx.iter().zip(x) {
                    full[i] = v;
                }
                let mut q = params.clone();
                unflatten(&mut q, &full);
                q.loss_and_grads(&inputs, &targets, false, Execution::Sequential).unwrap().0
            },
            &sub,
            1e-5,
        );
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        worst = worst.max(rel_err(&picked, &numeric));
    }
    worst
}
