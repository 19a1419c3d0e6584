use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LrSchedule, NAdam};
use crate::diffcore::{checkpoint, ParamStore, Real, Tape};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossBreakdown};
use crate::model::{Banet, Sample};
use crate::net_decoder::Stage;
use crate::nn::Fwd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_epochs: usize,
    /// Must equal the first warm restart.
    pub stage2_start_epoch: usize,
    pub seed: u64,
    pub precision: Precision,
    pub lr_max: f64,
    pub lr_min: f64,
    pub periods: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = LrSchedule::default();
        Self {
            batch_size: 32,
            total_epochs: s.total_epochs,
            stage2_start_epoch: s.first_restart(),
            seed: 0,
            precision: Precision::F32,
            lr_max: s.lr_max,
            lr_min: s.lr_min,
            periods: s.periods,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            periods: self.periods.clone(),
            total_epochs: self.total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.schedule();
        s.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.stage2_start_epoch != s.first_restart() {
            return Err(Error::Config(format!(
                "stage2_start_epoch {} must equal the first restart at epoch {}",
                self.stage2_start_epoch,
                s.first_restart()
            )));
        }
        Ok(())
    }

    pub fn stage_at(&self, epoch: usize) -> Stage {
        if epoch < self.stage2_start_epoch {
            Stage::S1
        } else {
            Stage::S2
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub stage: Stage,
    pub conf: f64,
    pub target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traj: Option<f64>,
    pub total: f64,
    /// Mean over samples of the best endpoint error among the six targets,
    /// measured on the forward passes of this epoch.
    #[serde(rename = "minFDE6")]
    pub min_fde6: f64,
}

#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub params: ParamStore<T>,
    pub optimizer: NAdam<T>,
    pub log: Vec<EpochRecord>,
}

/// Parameters updated in `stage`: everything except the completion head in
/// stage one.
pub fn active_set<T: Real>(params: &ParamStore<T>, stage: Stage) -> Vec<bool> {
    params
        .iter()
        .map(|(_, name, _)| stage == Stage::S2 || !Banet::is_stage2_param(name))
        .collect()
}

fn check_finite(b: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    for (component, v) in [
        ("conf", b.conf),
        ("target", b.target),
        ("traj", b.traj),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch,
                component,
            });
        }
    }
    Ok(())
}

fn min_endpoint_error(targets: &[f64], end: [f64; 2]) -> f64 {
    targets
        .chunks(2)
        .map(|g| (g[0] - end[0]).hypot(g[1] - end[1]))
        .fold(f64::INFINITY, f64::min)
}

/// Two-stage training over focal-actor samples. Every epoch reshuffles the
/// samples with a stream derived from `(seed, epoch)`; a batch is one tape.
pub fn train<T: Real>(
    model: &Banet,
    params: ParamStore<T>,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<Trained<T>> {
    cfg.validate()?;
    model.check_params(&params)?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.future.is_none()) {
        return Err(Error::Config(format!(
            "training sample {}/{} has no ground-truth future",
            s.scene_id, s.actor_id
        )));
    }
    let schedule = cfg.schedule();
    let mut params = params;
    let mut optimizer = NAdam::new(&params);
    let mut log = Vec::with_capacity(cfg.total_epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.total_epochs {
        let stage = cfg.stage_at(epoch);
        let lr = schedule.lr_at(epoch as f64)?;
        let active = active_set(&params, stage);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let (mut conf, mut target, mut traj, mut fde) = (0.0, 0.0, 0.0, 0.0);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, &params);
            let mut outs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                outs.push(model.forward(&mut f, &samples[i], stage)?);
            }
            let items: Vec<_> = outs.iter().copied().zip(chunk.iter().map(|&i| &samples[i])).collect();
            let loss = batch_loss(&mut f, &items, stage)?;
            check_finite(&loss.breakdown, epoch, batch)?;
            for (out, s) in &items {
                let end = *s.future.as_ref().and_then(|g| g.last()).expect("checked above");
                fde += min_endpoint_error(&tape.value(out.targets).to_f64(), end);
            }
            let grads = tape.backward(loss.total, &params)?;
            if !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    component: "gradient",
                });
            }
            optimizer.step(&mut params, &grads, lr, &active)?;
            let w = chunk.len() as f64;
            conf += w * loss.breakdown.conf;
            target += w * loss.breakdown.target;
            traj += w * loss.breakdown.traj;
        }
        let n = samples.len() as f64;
        let traj = (stage == Stage::S2).then_some(traj / n);
        let record = EpochRecord {
            epoch,
            lr,
            stage,
            conf: conf / n,
            target: target / n,
            traj,
            total: (conf + target) / n + traj.unwrap_or(0.0),
            min_fde6: fde / n,
        };
        on_epoch(&record)?;
        log.push(record);
    }
    Ok(Trained { params, optimizer, log })
}

/// One JSON line, without the newline.
pub fn log_line(record: &EpochRecord) -> String {
    serde_json::to_string(record).expect("log record serializes")
}

/// Writes the log as JSON lines.
pub fn write_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&log_line(r));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_log(text: &str) -> Result<Vec<EpochRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let de = &mut serde_json::Deserializer::from_str(l);
            serde_path_to_error::deserialize(de).map_err(Error::from_json)
        })
        .collect()
}

/// Saves parameters (`params.json`/`params.bin`) and optimizer state.
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    params: &ParamStore<T>,
    optimizer: &NAdam<T>,
    config_hash: Option<&str>,
) -> Result<()> {
    checkpoint::save(params, dir, "params", config_hash)?;
    optimizer.save(params, dir)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(ParamStore<T>, NAdam<T>)> {
    let params = checkpoint::load(dir, "params")?;
    let optimizer = NAdam::load(&params, dir)?;
    Ok((params, optimizer))
}
