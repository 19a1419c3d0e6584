//! Memorizes eight synthetic scenes with the desk-size network and prints
//! the per-epoch log.
//!
//! cargo run --example train_overfit -- [epochs] [batch_size] [lr_max]

use std::time::Instant;

use banet::diffcore::ParamStore;
use banet::model::{Banet, ModelConfig, Sample};
use banet::optim::{log_line, train, LrSchedule, TrainConfig};
use banet::scene::{generate_synthetic, SceneGenConfig};

fn main() -> banet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let epochs = arg(0, 200.0) as usize;
    let batch_size = arg(1, 1.0) as usize;
    let lr_max = arg(2, 1e-3);

    let gen = SceneGenConfig::desk();
    let cfg = ModelConfig::desk();
    let mut samples = Vec::new();
    for seed in 0..8 {
        samples.extend(Sample::focal_samples(&generate_synthetic(&gen, seed)?, &cfg)?);
    }
    let restarts = (1..).take_while(|&n| 6 * ((1 << n) - 1) <= epochs).last().unwrap_or(1);
    let schedule = LrSchedule {
        lr_max,
        ..LrSchedule::doubling(restarts, 6, epochs)
    };
    let train_cfg = TrainConfig {
        batch_size,
        total_epochs: epochs,
        lr_max: schedule.lr_max,
        lr_min: schedule.lr_min,
        periods: schedule.periods.clone(),
        seed: 7,
        ..TrainConfig::default()
    };
    let (model, params): (Banet, ParamStore<f32>) = Banet::init(&cfg, 7)?;
    let start = Instant::now();
    let out = train(&model, params, &samples, &train_cfg, |r| {
        if r.epoch % 10 == 0 || r.epoch + 1 == epochs || r.epoch == 5 || r.epoch == 6 {
            println!("{}", log_line(r));
        }
        Ok(())
    })?;
    let last = out.log.last().unwrap();
    println!(
        "{} samples, {epochs} epochs in {:.1}s, final train minFDE6 {:.3} m",
        samples.len(),
        start.elapsed().as_secs_f64(),
        last.min_fde6
    );
    Ok(())
}
