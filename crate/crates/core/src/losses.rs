//! Training losses: max-entropy confidence targets, KL confidence loss with
//! the 2 m filter, winner-take-all smooth-L1 on targets and trajectories.
//!
//! The plain `f64` functions are the reference definitions; [`batch_loss`]
//! builds the same quantities on a tape for training.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Var};
use crate::error::{Error, Result};
use crate::model::{Outputs, Sample};
use crate::net_decoder::Stage;
use crate::nn::Fwd;
use crate::scene::Point;

/// Actors whose best endpoint is farther than this (meters) are left out of
/// the confidence loss.
pub const CONF_FILTER_M: f64 = 2.0;
pub const SMOOTH_L1_BETA: f64 = 1.0;
/// Floor applied to predicted probabilities inside the KL logarithm.
pub const KL_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub conf: f64,
    pub target: f64,
    pub traj: f64,
    pub total: f64,
    pub n_conf_kept: usize,
    pub n_target: usize,
    pub stage: Stage,
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Largest pointwise distance between two equally long trajectories.
pub fn displacement_error(s: &[Point], gt: &[Point]) -> Result<f64> {
    if s.len() != gt.len() {
        return Err(Error::contract(format!(
            "displacement error over {} and {} steps",
            s.len(),
            gt.len()
        )));
    }
    Ok(s.iter().zip(gt).map(|(a, b)| dist(*a, *b)).fold(0.0, f64::max))
}

/// `softmax(-d)`, shifted by `min d`.
pub fn confidence_from_errors(d: &[f64]) -> Vec<f64> {
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|v| (lo - v).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Ground-truth mode distribution of `K` predicted trajectories.
pub fn gt_confidence(s: &[Vec<Point>], gt: &[Point]) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(Error::contract("gt_confidence needs at least one mode"));
    }
    let d = s
        .iter()
        .map(|m| displacement_error(m, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(confidence_from_errors(&d))
}

/// `KL(c_hat || c)` with `0 log 0 = 0` and `log c` floored at `ln 1e-12`.
pub fn confidence_loss(c: &[f64], c_hat: &[f64]) -> f64 {
    c.iter()
        .zip(c_hat)
        .filter(|(_, h)| **h > 0.0)
        .map(|(p, h)| h * (h.ln() - p.max(KL_LOG_FLOOR).ln()))
        .sum()
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

/// Mean smooth-L1 over the two components of `a - b`.
pub fn smooth_l1_point(a: Point, b: Point) -> f64 {
    0.5 * (smooth_l1(a[0] - b[0], SMOOTH_L1_BETA) + smooth_l1(a[1] - b[1], SMOOTH_L1_BETA))
}

/// Index of the target nearest to `gt`; the lowest index wins ties.
pub fn winner(targets: &[Point], gt: Point) -> usize {
    let mut best = 0;
    for (k, g) in targets.iter().enumerate().skip(1) {
        if dist(*g, gt) < dist(targets[best], gt) {
            best = k;
        }
    }
    best
}

/// Whether an actor's best endpoint is within [`CONF_FILTER_M`], inclusive.
pub fn keep_for_confidence(targets: &[Point], gt: Point) -> bool {
    targets.iter().map(|g| dist(*g, gt)).fold(f64::INFINITY, f64::min) <= CONF_FILTER_M
}

/// Indices of the actors kept by the confidence filter.
pub fn conf_filter(targets: &[Vec<Point>], gt_endpoints: &[Point]) -> Vec<usize> {
    (0..targets.len())
        .filter(|&i| keep_for_confidence(&targets[i], gt_endpoints[i]))
        .collect()
}

/// Winner-take-all target loss averaged over masked-in actors, and their count.
pub fn target_loss(targets: &[Vec<Point>], gt_endpoints: &[Point], mask: &[bool]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for ((g, gt), m) in targets.iter().zip(gt_endpoints).zip(mask) {
        if *m {
            sum += smooth_l1_point(g[winner(g, *gt)], *gt);
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Smooth-L1 over steps `0..T-1` of each masked-in actor's winning mode,
/// normalized by `N (T - 1)`.
pub fn trajectory_loss(s: &[Vec<Vec<Point>>], gt: &[Vec<Point>], winners: &[usize], mask: &[bool]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    let mut steps = 0;
    for i in 0..s.len() {
        if !mask[i] {
            continue;
        }
        let mode = &s[i][winners[i]];
        if mode.len() < 2 || mode.len() != gt[i].len() {
            return Err(Error::contract(format!(
                "trajectory loss needs T >= 2 and matching lengths, got {} and {}",
                mode.len(),
                gt[i].len()
            )));
        }
        steps = mode.len() - 1;
        sum += (0..steps).map(|t| smooth_l1_point(mode[t], gt[i][t])).sum::<f64>();
        n += 1;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(sum / (n * steps) as f64)
}

/// Combines stage components into a breakdown.
pub fn total_loss(
    stage: Stage,
    conf: f64,
    target: f64,
    traj: Option<f64>,
    n_conf_kept: usize,
    n_target: usize,
) -> Result<LossBreakdown> {
    let traj = match (stage, traj) {
        (Stage::S1, Some(_)) => return Err(Error::contract("trajectory loss supplied in stage one")),
        (Stage::S1, None) => 0.0,
        (Stage::S2, t) => t.ok_or_else(|| Error::contract("stage two needs a trajectory loss"))?,
    };
    Ok(LossBreakdown {
        conf,
        target,
        traj,
        total: conf + target + traj,
        n_conf_kept,
        n_target,
        stage,
    })
}

/// Differentiable batch loss and its breakdown.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub conf: Var,
    pub target: Var,
    pub traj: Option<Var>,
    pub breakdown: LossBreakdown,
}

fn points(v: &[f64]) -> Vec<Point> {
    v.chunks(2).map(|p| [p[0], p[1]]).collect()
}

/// Loss of a batch of focal-actor outputs. Winners and the confidence filter
/// are read from values; the ground-truth distribution stays on the tape, so
/// the gradient is that of the loss as written, including its dependence on
/// the predicted targets.
pub fn batch_loss<T: Real>(f: &mut Fwd<T>, items: &[(Outputs, &Sample)], stage: Stage) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut conf_terms = Vec::new();
    let mut target_terms = Vec::new();
    let mut traj_terms = Vec::new();
    let mut steps = 0;

    for (out, sample) in items {
        let gt = sample.future.as_ref().ok_or_else(|| {
            Error::contract(format!(
                "sample {}/{} has no ground truth",
                sample.scene_id, sample.actor_id
            ))
        })?;
        let end = *gt.last().ok_or_else(|| Error::contract("empty ground truth"))?;
        let targets = points(&f.tape.value(out.targets).to_f64());
        let k = targets.len();
        let trajs = match (stage, out.trajectories) {
            (Stage::S1, _) => None,
            (Stage::S2, Some(v)) => Some(v),
            (Stage::S2, None) => return Err(Error::contract("stage two outputs lack trajectories")),
        };

        if keep_for_confidence(&targets, end) {
            let d = match trajs {
                Some(v) => {
                    let t = gt.len();
                    let s = f.tape.reshape(v, &[k * t, 2])?;
                    let tiled: Vec<f64> = (0..k).flat_map(|_| gt.iter().flatten().copied()).collect();
                    let e = f.constant(&[k * t, 2], &tiled)?;
                    let diff = f.tape.sub(s, e)?;
                    let norms = f.tape.l2_norm_rows(diff)?;
                    let norms = f.tape.reshape(norms, &[k, t])?;
                    f.tape.max(norms, 1)?
                }
                None => {
                    let g = f.tape.reshape(out.targets, &[k, 2])?;
                    let tiled: Vec<f64> = (0..k).flat_map(|_| end).collect();
                    let e = f.constant(&[k, 2], &tiled)?;
                    let diff = f.tape.sub(g, e)?;
                    f.tape.l2_norm_rows(diff)?
                }
            };
            let neg = f.tape.scale(d, -1.0);
            let neg = f.tape.reshape(neg, &[1, k])?;
            let c_hat = f.tape.softmax(neg, 1)?;
            let log_hat = f.tape.log_softmax(neg, 1)?;
            let log_c = f.tape.log_softmax(out.logits, 1)?;
            let ratio = f.tape.sub(log_hat, log_c)?;
            let kl = f.tape.mul(c_hat, ratio)?;
            conf_terms.push(f.tape.sum_all(kl));
        }

        if !sample.last_observed {
            continue;
        }
        let w = winner(&targets, end);
        let g = f.tape.reshape(out.targets, &[k, 2])?;
        let g = f.tape.gather(g, &[w])?;
        let e = f.constant(&[1, 2], &end)?;
        let diff = f.tape.sub(g, e)?;
        let l = f.tape.smooth_l1(diff, SMOOTH_L1_BETA)?;
        target_terms.push(f.tape.sum_all(l));

        if let Some(v) = trajs {
            let t = gt.len();
            if t < 2 {
                return Err(Error::contract("trajectory loss needs T >= 2"));
            }
            steps = t - 1;
            let s = f.tape.reshape(v, &[k, 2 * t])?;
            let s = f.tape.gather(s, &[w])?;
            let s = f.tape.narrow(s, 1, 0, 2 * steps)?;
            let flat: Vec<f64> = gt[..steps].iter().flatten().copied().collect();
            let e = f.constant(&[1, 2 * steps], &flat)?;
            let diff = f.tape.sub(s, e)?;
            let l = f.tape.smooth_l1(diff, SMOOTH_L1_BETA)?;
            traj_terms.push(f.tape.sum_all(l));
        }
    }

    let n_kept = conf_terms.len();
    let n_target = target_terms.len();
    let mean_of = |f: &mut Fwd<T>, terms: &[Var], denom: f64| -> Result<Var> {
        if terms.is_empty() {
            return f.constant(&[1], &[0.0]);
        }
        let mut acc = f.tape.reshape(terms[0], &[1])?;
        for t in &terms[1..] {
            let t = f.tape.reshape(*t, &[1])?;
            acc = f.tape.add(acc, t)?;
        }
        Ok(f.tape.scale(acc, 1.0 / denom))
    };
    let conf = mean_of(f, &conf_terms, n_kept as f64)?;
    let target = mean_of(f, &target_terms, 2.0 * n_target as f64)?;
    let traj = match stage {
        Stage::S1 => None,
        Stage::S2 => Some(mean_of(f, &traj_terms, 2.0 * (n_target * steps.max(1)) as f64)?),
    };

    let mut total = f.tape.add(conf, target)?;
    if let Some(t) = traj {
        total = f.tape.add(total, t)?;
    }
    let value = |f: &Fwd<T>, v: Var| f.tape.value(v).to_f64()[0];
    let breakdown = total_loss(
        stage,
        value(f, conf).max(0.0),
        value(f, target),
        traj.map(|t| value(f, t)),
        n_kept,
        n_target,
    )?;
    Ok(BatchLoss {
        total,
        conf,
        target,
        traj,
        breakdown,
    })
}
