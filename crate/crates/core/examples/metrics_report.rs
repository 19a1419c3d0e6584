//! Scores hand-built forecasts against synthetic ground truth and prints the
//! benchmark table.
//!
//! cargo run --example metrics_report

use banet::metrics::evaluate;
use banet::net_decoder::Forecast;
use banet::scene::{generate_synthetic, SceneGenConfig};

fn main() -> banet::Result<()> {
    let scenes: Vec<_> = (0..4)
        .map(|s| generate_synthetic(&SceneGenConfig::desk(), s))
        .collect::<banet::Result<_>>()?;
    let mut forecasts = Vec::new();
    for scene in &scenes {
        for a in scene.focal_actors() {
            let gt = a.future_gt.clone().expect("synthetic actors have a future");
            // six fans around the truth, the closest one 1.5 m off at the end
            let trajectories: Vec<_> = (0..6)
                .map(|k| {
                    let lateral = 1.5 * (k as f64 + 1.0) * if k % 2 == 0 { 1.0 } else { -1.0 };
                    let t = gt.len() as f64;
                    gt.iter()
                        .enumerate()
                        .map(|(i, p)| [p[0], p[1] + lateral * (i as f64 + 1.0) / t])
                        .collect()
                })
                .collect::<Vec<Vec<_>>>();
            forecasts.push(Forecast {
                scene_id: scene.id.clone(),
                actor_id: a.id.clone(),
                targets: trajectories.iter().map(|s| *s.last().unwrap()).collect(),
                trajectories,
                confidences: vec![0.1, 0.3, 0.15, 0.15, 0.15, 0.15],
            });
        }
    }
    let report = evaluate(&forecasts, &scenes)?;
    report.check_invariants()?;
    println!("{}", report.table());
    println!("{}", report.to_json());
    Ok(())
}
