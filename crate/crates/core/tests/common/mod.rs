#![allow(dead_code)]

pub mod brute;
pub mod dense;

use banet::diffcore::{grad_check, jitter, CoordSample, GradCheckReport, ParamStore, Tape, Tensor, Var};
use banet::nn::Fwd;
use banet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Scalar objective `sum(out * R)` for a fixed random `R`, so every output
/// coordinate carries a distinct weight.
pub fn readout(f: &mut Fwd<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = f.tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = uniform(&mut rng(seed), n, 1.0);
    let r = f.tape.constant(Tensor::from_f64(&shape, &r)?);
    let prod = f.tape.mul(out, r)?;
    Ok(f.tape.sum_all(prod))
}

/// Gradient check of `sum(block(params) * R)` over sampled coordinates, at
/// the given parameters moved off zero-initialized biases.
pub fn check_block<F>(params: &ParamStore<f64>, per_param: usize, block: F) -> GradCheckReport
where
    F: Fn(&mut Fwd<f64>) -> Result<Var>,
{
    let mut params = params.clone();
    jitter(&mut params, 0.1, 17);
    grad_check(
        |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let mut f = Fwd::new(tape, store);
            let out = block(&mut f)?;
            readout(&mut f, out, 99)
        },
        &params,
        GRAD_EPS,
        CoordSample {
            per_param: Some(per_param),
            seed: 5,
        },
    )
    .expect("gradient check runs")
}

/// Biased-variance layer norm of each `d`-wide row, eps 1e-5.
pub fn layer_norm_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()));
    }
    out
}

/// `[m, k] x [k, n]` by the textbook triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Width 8, one graph layer, H=6, T=5.
pub fn tiny_config() -> banet::model::ModelConfig {
    banet::model::ModelConfig {
        d: 8,
        gcn_layers: 1,
        history: 6,
        future: 5,
        ..banet::model::ModelConfig::default()
    }
}

/// Two 24 m lanes at 3 m nodes, matching [`tiny_config`].
pub fn tiny_scene(seed: u64, actors: usize) -> banet::scene::Scene {
    let cfg = banet::scene::SceneGenConfig {
        num_lanes: 2,
        lane_length: 24.0,
        segment_len: 3.0,
        num_actors: actors,
        history: 6,
        future: 5,
        ..banet::scene::SceneGenConfig::desk()
    };
    banet::scene::generate_synthetic(&cfg, seed).expect("valid generator config")
}
