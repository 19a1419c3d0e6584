//! Fuses seven noisy copies of one forecast into six modes with the
//! confidence-weighted k-means ensemble.
//!
//! cargo run --example ensemble_fusion -- [seed]

use banet::ensemble::{fuse, model_factors, SubmodelPrediction};
use banet::net_decoder::Forecast;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> banet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models: Vec<SubmodelPrediction> = (0..7)
        .map(|j| {
            let trajectories: Vec<Vec<[f64; 2]>> = (0..6)
                .map(|k| {
                    let a = k as f64 * 0.25 - 0.6 + rng.random_range(-0.05..0.05);
                    (1..=10)
                        .map(|t| [3.0 * t as f64 * a.cos(), 3.0 * t as f64 * a.sin()])
                        .collect()
                })
                .collect();
            let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
            let z: f64 = raw.iter().sum();
            SubmodelPrediction {
                model_id: format!("model_{j}"),
                alpha: rng.random_range(1.8..2.4),
                forecasts: vec![Forecast {
                    scene_id: "demo".into(),
                    actor_id: "car".into(),
                    targets: trajectories.iter().map(|s| *s.last().unwrap()).collect(),
                    trajectories,
                    confidences: raw.iter().map(|c| c / z).collect(),
                }],
            }
        })
        .collect();
    let alphas: Vec<f64> = models.iter().map(|m| m.alpha).collect();
    for (m, f) in models.iter().zip(model_factors(&alphas)) {
        println!("{}: alpha {:.3}, factor {f:.3}", m.model_id, m.alpha);
    }
    let fused = fuse(&models, seed)?;
    let out = &fused[0];
    for (c, (s, p)) in out
        .forecast
        .trajectories
        .iter()
        .zip(&out.forecast.confidences)
        .enumerate()
    {
        let members = out.membership.iter().filter(|&&m| m == c).count();
        let end = s.last().unwrap();
        println!(
            "mode {c}: end ({:6.2}, {:6.2}), confidence {p:.3}, {members} members",
            end[0], end[1]
        );
    }
    Ok(())
}
