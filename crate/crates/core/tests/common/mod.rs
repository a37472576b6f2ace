#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use snrlab::diffusion::NoisyBatch;
use snrlab::lora::{LoraAdapter, TargetSet};
use snrlab::net::{Architecture, Cond, DenoiserParams};
use snrlab::params::ParamSet;
use snrlab::samplers::NoiseLevel;
use snrlab::schedule;

pub fn small_arch() -> Architecture {
    Architecture {
        channels: 3,
        height: 2,
        width: 2,
        hidden_widths: vec![7, 5],
        time_embed_dim: 4,
        n_content: 2,
        n_style: 3,
        cond_embed_dim: 3,
    }
}

fn jitter<P: ParamSet>(p: &mut P, rng: &mut ChaCha8Rng, scale: f64) {
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Initialized parameters with every entry (biases included) moved off
/// its initial value.
pub fn params(seed: u64) -> DenoiserParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DenoiserParams::init(&small_arch(), &mut rng).unwrap();
    jitter(&mut p, &mut rng, 0.1);
    p
}

/// Adapter on every layer with nonzero `B`, so both factors get gradients.
pub fn adapter(base: &DenoiserParams, rank: usize, seed: u64) -> LoraAdapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = TargetSet::All.resolve(base);
    let mut a = LoraAdapter::attach(base, &targets, rank, 2.0 * rank as f64, &mut rng).unwrap();
    jitter(&mut a, &mut rng, 0.1);
    a
}

pub fn batch(arch: &Architecture, n: usize, seed: u64) -> (NoisyBatch, Vec<Cond>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = arch.input_dim();
    let x0 = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    let eps = Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal));
    let levels: Vec<NoiseLevel> = (0..n)
        .map(|_| {
            let t = rng.gen_range(0.05..0.95);
            NoiseLevel {
                lambda: schedule::log_snr(t).unwrap(),
                t,
            }
        })
        .collect();
    let cond = (0..n)
        .map(|i| match i % 4 {
            0 => Cond::NULL,
            1 => Cond::new(1, 2),
            2 => Cond::new(0, 1).without_style(),
            _ => Cond::new(i % arch.n_content, i % arch.n_style),
        })
        .collect();
    (NoisyBatch::new(x0, eps, &levels).unwrap(), cond)
}

/// Per-tensor relative error `|g - g_fd| / max(|g_fd|, |g|)` of an analytic
/// gradient against central differences of `loss` with step `h`.
pub fn fd_errors<P: ParamSet>(params: &P, analytic: &P, h: f64, loss: impl Fn(&P) -> f64) -> Vec<(String, f64)> {
    let names: Vec<(String, usize)> = params.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut out = Vec::new();
    for (k, (name, len)) in names.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        let mut an2 = 0.0;
        for i in 0..*len {
            let mut p = params.clone();
            p.tensors_mut()[k][i] += h;
            let up = loss(&p);
            p.tensors_mut()[k][i] -= 2.0 * h;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * h);
            let g = grads[k][i];
            diff2 += (g - fd).powi(2);
            fd2 += fd * fd;
            an2 += g * g;
        }
        let denom = fd2.sqrt().max(an2.sqrt());
        let rel = if denom < 1e-14 { 0.0 } else { diff2.sqrt() / denom };
        out.push((name.clone(), rel));
    }
    out
}
