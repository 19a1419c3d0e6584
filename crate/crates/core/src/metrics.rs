//! Displacement metrics over K modes and their dataset-level report.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_decoder::Forecast;
use crate::scene::{Point, Scene};

/// Endpoint error (meters) above which an actor counts as a miss.
pub const MISS_THRESHOLD_M: f64 = 2.0;

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Final-point error.
pub fn fde(mode: &[Point], gt: &[Point]) -> f64 {
    dist(
        *mode.last().expect("non-empty mode"),
        *gt.last().expect("non-empty ground truth"),
    )
}

/// Mean pointwise error; lengths must match.
pub fn ade(mode: &[Point], gt: &[Point]) -> Result<f64> {
    if mode.len() != gt.len() || gt.is_empty() {
        return Err(Error::contract(format!(
            "ADE over {} predicted and {} true steps",
            mode.len(),
            gt.len()
        )));
    }
    Ok(mode.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64)
}

/// Modes evaluated under `k_eval`: all of them, or the most confident one.
pub fn evaluated_modes(confidences: &[f64], k_eval: usize) -> Result<Vec<usize>> {
    let k = confidences.len();
    if k_eval == 0 || k_eval > k {
        return Err(Error::contract(format!("cannot evaluate {k_eval} of {k} modes")));
    }
    if k_eval == k {
        return Ok((0..k).collect());
    }
    if k_eval == 1 {
        let mut best = 0;
        for i in 1..k {
            if confidences[i] > confidences[best] {
                best = i;
            }
        }
        return Ok(vec![best]);
    }
    Err(Error::contract(format!("k_eval must be 1 or {k}, got {k_eval}")))
}

fn argmin(modes: &[usize], err: impl Fn(usize) -> Result<f64>) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for &m in modes {
        let e = err(m)?;
        if best.is_none_or(|(b, _)| e < b) {
            best = Some((e, m));
        }
    }
    Ok(best.expect("at least one evaluated mode"))
}

/// Smallest final-point error among evaluated modes and the mode attaining it.
pub fn min_fde(s: &[Vec<Point>], gt: &[Point], confidences: &[f64], k_eval: usize) -> Result<(f64, usize)> {
    argmin(&evaluated_modes(confidences, k_eval)?, |m| Ok(fde(&s[m], gt)))
}

/// Smallest average error among evaluated modes and the mode attaining it.
pub fn min_ade(s: &[Vec<Point>], gt: &[Point], confidences: &[f64], k_eval: usize) -> Result<(f64, usize)> {
    argmin(&evaluated_modes(confidences, k_eval)?, |m| ade(&s[m], gt))
}

/// `value + (1 - p)^2`.
pub fn brier(value: f64, p_best: f64) -> f64 {
    value + (1.0 - p_best).powi(2)
}

/// Per-actor metrics against one ground-truth future.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActorMetrics {
    pub brier_min_fde: f64,
    pub min_fde: f64,
    pub min_fde1: f64,
    pub brier_min_ade: f64,
    pub min_ade: f64,
    pub min_ade1: f64,
    pub miss: bool,
    pub miss1: bool,
}

pub fn actor_metrics(f: &Forecast, gt: &[Point]) -> Result<ActorMetrics> {
    let k = f.confidences.len();
    let (fde_k, fde_mode) = min_fde(&f.trajectories, gt, &f.confidences, k)?;
    let (fde_1, _) = min_fde(&f.trajectories, gt, &f.confidences, 1)?;
    let (ade_k, ade_mode) = min_ade(&f.trajectories, gt, &f.confidences, k)?;
    let (ade_1, _) = min_ade(&f.trajectories, gt, &f.confidences, 1)?;
    Ok(ActorMetrics {
        brier_min_fde: brier(fde_k, f.confidences[fde_mode]),
        min_fde: fde_k,
        min_fde1: fde_1,
        brier_min_ade: brier(ade_k, f.confidences[ade_mode]),
        min_ade: ade_k,
        min_ade1: ade_1,
        miss: fde_k > MISS_THRESHOLD_M,
        miss1: fde_1 > MISS_THRESHOLD_M,
    })
}

/// Fraction of actors whose best evaluated endpoint misses by more than 2 m.
pub fn miss_rate(forecasts: &[&Forecast], gts: &[&[Point]], k_eval: usize) -> Result<f64> {
    if forecasts.is_empty() || forecasts.len() != gts.len() {
        return Err(Error::contract("miss rate needs one ground truth per forecast"));
    }
    let mut misses = 0;
    for (f, gt) in forecasts.iter().zip(gts) {
        if min_fde(&f.trajectories, gt, &f.confidences, k_eval)?.0 > MISS_THRESHOLD_M {
            misses += 1;
        }
    }
    Ok(misses as f64 / forecasts.len() as f64)
}

/// Dataset averages, in the column order of the standard results table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    #[serde(rename = "brier-minFDE(6)")]
    pub brier_min_fde6: f64,
    #[serde(rename = "minFDE(6)")]
    pub min_fde6: f64,
    #[serde(rename = "minFDE(1)")]
    pub min_fde1: f64,
    #[serde(rename = "brier-minADE(6)")]
    pub brier_min_ade6: f64,
    #[serde(rename = "minADE(6)")]
    pub min_ade6: f64,
    #[serde(rename = "minADE(1)")]
    pub min_ade1: f64,
    #[serde(rename = "MR(6)")]
    pub mr6: f64,
    #[serde(rename = "MR(1)")]
    pub mr1: f64,
    pub scenes: usize,
    pub actors: usize,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 8] = [
        "brier-minFDE(6)",
        "minFDE(6)",
        "minFDE(1)",
        "brier-minADE(6)",
        "minADE(6)",
        "minADE(1)",
        "MR(6)",
        "MR(1)",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.brier_min_fde6,
            self.min_fde6,
            self.min_fde1,
            self.brier_min_ade6,
            self.min_ade6,
            self.min_ade1,
            self.mr6,
            self.mr1,
        ]
    }

    /// Averages per-actor metrics in the given order.
    pub fn from_actors(metrics: &[ActorMetrics], scenes: usize) -> Result<Self> {
        if metrics.is_empty() {
            return Err(Error::Evaluation("no actors to evaluate".into()));
        }
        let n = metrics.len() as f64;
        let mean = |g: fn(&ActorMetrics) -> f64| metrics.iter().map(g).sum::<f64>() / n;
        Ok(Self {
            brier_min_fde6: mean(|m| m.brier_min_fde),
            min_fde6: mean(|m| m.min_fde),
            min_fde1: mean(|m| m.min_fde1),
            brier_min_ade6: mean(|m| m.brier_min_ade),
            min_ade6: mean(|m| m.min_ade),
            min_ade1: mean(|m| m.min_ade1),
            mr6: mean(|m| f64::from(u8::from(m.miss))),
            mr1: mean(|m| f64::from(u8::from(m.miss1))),
            scenes,
            actors: metrics.len(),
        })
    }

    /// Checks the orderings every report must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        let ok = self.min_fde6 <= self.min_fde1
            && self.min_ade6 <= self.min_ade1
            && self.brier_min_fde6 >= self.min_fde6
            && self.brier_min_ade6 >= self.min_ade6
            && (0.0..=1.0).contains(&self.mr6)
            && (0.0..=1.0).contains(&self.mr1)
            && self.mr6 <= self.mr1;
        if ok {
            Ok(())
        } else {
            Err(Error::Evaluation(format!("report violates metric orderings: {self:?}")))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with a header row and one value row.
    pub fn table(&self) -> String {
        let cells: Vec<String> = self.values().iter().map(|v| format!("{v:.4}")).collect();
        let widths: Vec<usize> = Self::COLUMNS
            .iter()
            .zip(&cells)
            .map(|(c, v)| c.len().max(v.len()))
            .collect();
        let mut out = String::new();
        for (c, w) in Self::COLUMNS.iter().zip(&widths) {
            let _ = write!(out, "{c:>w$}  ");
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
        for (v, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "{v:>w$}  ");
        }
        out.truncate(out.trim_end().len());
        let _ = write!(out, "\n({} actors, {} scenes)\n", self.actors, self.scenes);
        out
    }
}

/// Scores forecasts against every focal actor with a ground-truth future.
/// Each such actor needs exactly one forecast; extra forecasts are ignored.
pub fn evaluate(forecasts: &[Forecast], scenes: &[Scene]) -> Result<MetricReport> {
    let mut by_key: HashMap<(&str, &str), &Forecast> = HashMap::new();
    for f in forecasts {
        if by_key.insert((&f.scene_id, &f.actor_id), f).is_some() {
            return Err(Error::Evaluation(format!(
                "duplicate forecast for {}/{}",
                f.scene_id, f.actor_id
            )));
        }
    }
    let mut missing = Vec::new();
    let mut metrics = Vec::new();
    let mut scored_scenes = 0;
    for scene in scenes {
        let mut any = false;
        for actor in scene.focal_actors() {
            let Some(gt) = &actor.future_gt else { continue };
            match by_key.get(&(scene.id.as_str(), actor.id.as_str())) {
                None => missing.push(format!("{}/{}", scene.id, actor.id)),
                Some(f) => {
                    let m = actor_metrics(f, gt)
                        .map_err(|e| Error::Evaluation(format!("{}/{}: {e}", scene.id, actor.id)))?;
                    metrics.push(m);
                    any = true;
                }
            }
        }
        scored_scenes += usize::from(any);
    }
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "missing predictions for: {}",
            missing.join(", ")
        )));
    }
    MetricReport::from_actors(&metrics, scored_scenes)
}
