//! Fusing several models' forecasts into one set of six modes.
//!
//! Every sub-model contributes its K trajectories for an actor. Each
//! trajectory is weighted by its own confidence times a softmax over the
//! negated validation scores (α) of the sub-models, so better models count
//! more. The pooled endpoints are clustered with weighted k-means and each
//! cluster becomes one output mode: the weighted mean of its trajectories,
//! with the cluster's share of the total weight as confidence.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net_decoder::{Forecast, PredictionFile, MODES};
use crate::scene::Point;

pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// One sub-model's forecasts and its validation brier-minFDE.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmodelPrediction {
    pub model_id: String,
    pub alpha: f64,
    pub forecasts: Vec<Forecast>,
}

impl SubmodelPrediction {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Ensemble(format!(
                "model {}: alpha must be positive and finite, got {}",
                self.model_id, self.alpha
            )));
        }
        let mut seen = HashSet::new();
        for f in &self.forecasts {
            f.validate()?;
            if !seen.insert((f.scene_id.as_str(), f.actor_id.as_str())) {
                return Err(Error::Ensemble(format!(
                    "model {} forecasts {}/{} twice",
                    self.model_id, f.scene_id, f.actor_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub model_id: String,
    pub alpha: f64,
    /// Relative paths are resolved against the manifest's directory.
    pub prediction_file: PathBuf,
}

/// Reads a manifest and every prediction file it names.
pub fn load_manifest(path: &Path) -> Result<Vec<SubmodelPrediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let entries: Vec<ManifestEntry> = serde_path_to_error::deserialize(de).map_err(Error::from_json)?;
    if entries.is_empty() {
        return Err(Error::Ensemble("manifest lists no sub-models".into()));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    entries
        .into_iter()
        .map(|e| {
            let file = base.join(&e.prediction_file);
            let sub = SubmodelPrediction {
                model_id: e.model_id,
                alpha: e.alpha,
                forecasts: PredictionFile::load(&file)?.predictions,
            };
            sub.validate()?;
            Ok(sub)
        })
        .collect()
}

/// Softmax over `-alpha`, one factor per sub-model.
pub fn model_factors(alphas: &[f64]) -> Vec<f64> {
    let lo = alphas.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = alphas.iter().map(|a| (lo - a).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Per-trajectory weights, sub-model major: `c[j][i] * factor[j]`.
pub fn ensemble_weights(confidences: &[&[f64]], alphas: &[f64]) -> Vec<f64> {
    assert_eq!(confidences.len(), alphas.len(), "one alpha per sub-model");
    let factors = model_factors(alphas);
    confidences
        .iter()
        .zip(&factors)
        .flat_map(|(c, f)| c.iter().map(move |ci| ci * f))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Vec<Point>,
    /// False for clusters that ended with no members.
    pub occupied: Vec<bool>,
    pub iterations: usize,
    /// Weighted objective after the initial assignment and after every
    /// accepted Lloyd iteration.
    pub objective: Vec<f64>,
}

fn sq_dist(a: Point, b: Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

fn nearest(p: Point, centers: &[Point]) -> usize {
    let mut best = 0;
    for (c, center) in centers.iter().enumerate().skip(1) {
        if sq_dist(p, *center) < sq_dist(p, centers[best]) {
            best = c;
        }
    }
    best
}

fn objective(points: &[Point], weights: &[f64], centers: &[Point], assign: &[usize]) -> f64 {
    points
        .iter()
        .zip(weights)
        .zip(assign)
        .map(|((p, w), &a)| w * sq_dist(*p, centers[a]))
        .sum()
}

/// Draws an index with probability proportional to `mass`, or `None` when
/// all mass is zero.
fn draw(mass: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, m) in mass.iter().enumerate() {
        if *m > 0.0 {
            acc += m;
            last = Some(i);
            if r < acc {
                return last;
            }
        }
    }
    last
}

fn seed_centers(points: &[Point], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let first = draw(weights, rng).expect("weights checked to have positive mass");
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(*p, points[first])).collect();
    while chosen.len() < k {
        let mass: Vec<f64> = weights.iter().zip(&d2).map(|(w, d)| w * d).collect();
        // every weighted point already sits on a center: take the heaviest unused one
        let next = draw(&mass, rng).unwrap_or_else(|| {
            (0..points.len())
                .filter(|i| !chosen.contains(i))
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if weights[b] >= weights[i] => Some(b),
                    _ => Some(i),
                })
                .expect("more points than centers")
        });
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(*p, points[next]));
        }
    }
    chosen.iter().map(|&i| points[i]).collect()
}

/// Weighted mean of the points in each cluster; clusters whose members all
/// weigh zero use the plain mean, empty ones keep their center.
fn update_centers(points: &[Point], weights: &[f64], assign: &[usize], centers: &mut [Point]) -> Vec<usize> {
    let k = centers.len();
    let mut sum = vec![[0.0; 2]; k];
    let mut plain = vec![[0.0; 2]; k];
    let mut w = vec![0.0; k];
    let mut count = vec![0usize; k];
    for ((p, wi), &a) in points.iter().zip(weights).zip(assign) {
        sum[a] = [sum[a][0] + wi * p[0], sum[a][1] + wi * p[1]];
        plain[a] = [plain[a][0] + p[0], plain[a][1] + p[1]];
        w[a] += wi;
        count[a] += 1;
    }
    for c in 0..k {
        if w[c] > 0.0 {
            centers[c] = [sum[c][0] / w[c], sum[c][1] / w[c]];
        } else if count[c] > 0 {
            let n = count[c] as f64;
            centers[c] = [plain[c][0] / n, plain[c][1] / n];
        }
    }
    count
}

/// Moves each empty cluster onto the point farthest (by weighted squared
/// distance) from its own center.
fn reseed_empty(points: &[Point], weights: &[f64], assign: &mut [usize], centers: &mut [Point], count: &mut [usize]) {
    for c in 0..centers.len() {
        if count[c] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| count[assign[i]] > 1)
            .map(|i| (weights[i] * sq_dist(points[i], centers[assign[i]]), i))
            .filter(|(d, _)| *d > 0.0)
            .fold(None, |best: Option<(f64, usize)>, cand| match best {
                Some(b) if b.0 >= cand.0 => Some(b),
                _ => Some(cand),
            });
        if let Some((_, i)) = far {
            count[assign[i]] -= 1;
            assign[i] = c;
            count[c] = 1;
            centers[c] = points[i];
        }
    }
}

/// Weighted k-means with weighted k-means++ seeding. Lloyd iterations stop when
/// assignments are stable, when an iteration fails to lower the objective
/// (only rounding can cause that), or after 100 iterations. With fewer
/// points than clusters each point is its own cluster and the rest are
/// reported unoccupied.
pub fn weighted_kmeans(points: &[Point], weights: &[f64], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || points.len() != weights.len() {
        return Err(Error::Ensemble(format!(
            "k-means needs k >= 1 and one weight per point, got k={k}, {} points, {} weights",
            points.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::Ensemble(
            "k-means weights must be finite, non-negative and not all zero".into(),
        ));
    }
    if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(Error::Ensemble("k-means points must be finite".into()));
    }
    let m = points.len();
    if m < k {
        let mut centers = points.to_vec();
        centers.resize(k, [0.0, 0.0]);
        return Ok(KMeans {
            assignments: (0..m).collect(),
            centers,
            occupied: (0..k).map(|c| c < m).collect(),
            iterations: 0,
            objective: vec![0.0],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(points, weights, k, &mut rng);
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(*p, &centers)).collect();
    let mut history = vec![objective(points, weights, &centers, &assign)];
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        let mut next_centers = centers.clone();
        let mut next_assign = assign.clone();
        let mut count = update_centers(points, weights, &next_assign, &mut next_centers);
        reseed_empty(points, weights, &mut next_assign, &mut next_centers, &mut count);
        for (a, p) in next_assign.iter_mut().zip(points) {
            *a = nearest(*p, &next_centers);
        }
        let obj = objective(points, weights, &next_centers, &next_assign);
        if obj > *history.last().unwrap() {
            break;
        }
        iterations += 1;
        let stable = next_assign == assign;
        centers = next_centers;
        assign = next_assign;
        history.push(obj);
        if stable {
            break;
        }
    }
    let mut occupied = vec![false; k];
    for &a in &assign {
        occupied[a] = true;
    }
    Ok(KMeans {
        assignments: assign,
        centers,
        occupied,
        iterations,
        objective: history,
    })
}

/// One fused actor: the output forecast and, for every pooled input
/// trajectory (sub-model major), the output mode it was merged into.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedActor {
    pub forecast: Forecast,
    pub membership: Vec<usize>,
}

fn weighted_mean(items: &[&[Point]], weights: &[f64], members: &[usize]) -> Vec<Point> {
    let len = items[members[0]].len();
    let total: f64 = members.iter().map(|&m| weights[m]).sum();
    (0..len)
        .map(|t| {
            let mut acc = [0.0; 2];
            for &m in members {
                let (w, p) = if total > 0.0 {
                    (weights[m] / total, items[m][t])
                } else {
                    (1.0 / members.len() as f64, items[m][t])
                };
                acc = [acc[0] + w * p[0], acc[1] + w * p[1]];
            }
            acc
        })
        .collect()
}

/// Fused trajectories, their endpoints, confidences, and the cluster of
/// every pooled trajectory.
pub type FusedPool = (Vec<Vec<Point>>, Vec<Point>, Vec<f64>, Vec<usize>);

/// Clusters a pool of weighted trajectories on their endpoints into `k` modes.
pub fn fuse_pool(
    trajectories: &[&[Point]],
    targets: &[Point],
    weights: &[f64],
    k: usize,
    seed: u64,
) -> Result<FusedPool> {
    let ends: Vec<Point> = trajectories
        .iter()
        .map(|s| {
            s.last()
                .copied()
                .ok_or_else(|| Error::Ensemble("empty trajectory in pool".into()))
        })
        .collect::<Result<_>>()?;
    let km = weighted_kmeans(&ends, weights, k, seed)?;
    let mut clusters: Vec<(usize, f64, Vec<usize>)> = (0..k)
        .filter(|&c| km.occupied[c])
        .map(|c| {
            let members: Vec<usize> = (0..ends.len()).filter(|&i| km.assignments[i] == c).collect();
            let w = members.iter().map(|&i| weights[i]).sum();
            (c, w, members)
        })
        .collect();
    clusters.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: f64 = clusters.iter().map(|c| c.1).sum();

    let target_rows: Vec<[Point; 1]> = targets.iter().map(|p| [*p]).collect();
    let target_refs: Vec<&[Point]> = target_rows.iter().map(|r| &r[..]).collect();
    let mut trajs = Vec::with_capacity(k);
    let mut fused_targets = Vec::with_capacity(k);
    let mut conf = Vec::with_capacity(k);
    let mut membership = vec![0; ends.len()];
    for (out, (_, w, members)) in clusters.iter().enumerate() {
        trajs.push(weighted_mean(trajectories, weights, members));
        fused_targets.push(weighted_mean(&target_refs, weights, members)[0]);
        conf.push(w / total);
        for &m in members {
            membership[m] = out;
        }
    }
    // unoccupied clusters (duplicate endpoints) repeat the top mode at zero weight
    while trajs.len() < k {
        trajs.push(trajs[0].clone());
        fused_targets.push(fused_targets[0]);
        conf.push(0.0);
    }
    Ok((trajs, fused_targets, conf, membership))
}

/// Deterministic per-actor seed.
pub fn actor_seed(seed: u64, scene_id: &str, actor_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(scene_id.as_bytes());
    h.update([0u8]);
    h.update(actor_id.as_bytes());
    let digest = h.finalize();
    seed ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Fuses one actor's forecasts from every sub-model.
pub fn fuse_actor(members: &[(&Forecast, f64)], seed: u64) -> Result<FusedActor> {
    let first = members
        .first()
        .ok_or_else(|| Error::Ensemble("no sub-models to fuse".into()))?
        .0;
    let t = first.trajectories[0].len();
    if let Some((f, _)) = members.iter().find(|(f, _)| f.trajectories[0].len() != t) {
        return Err(Error::Ensemble(format!(
            "{}/{}: sub-models disagree on horizon ({} vs {t})",
            f.scene_id,
            f.actor_id,
            f.trajectories[0].len()
        )));
    }
    let conf: Vec<&[f64]> = members.iter().map(|(f, _)| &f.confidences[..]).collect();
    let alphas: Vec<f64> = members.iter().map(|m| m.1).collect();
    let weights = ensemble_weights(&conf, &alphas);
    let trajs: Vec<&[Point]> = members
        .iter()
        .flat_map(|(f, _)| f.trajectories.iter().map(|s| &s[..]))
        .collect();
    let targets: Vec<Point> = members.iter().flat_map(|(f, _)| f.targets.iter().copied()).collect();
    let (trajectories, targets, confidences, membership) = fuse_pool(
        &trajs,
        &targets,
        &weights,
        MODES,
        actor_seed(seed, &first.scene_id, &first.actor_id),
    )?;
    Ok(FusedActor {
        forecast: Forecast {
            scene_id: first.scene_id.clone(),
            actor_id: first.actor_id.clone(),
            trajectories,
            confidences,
            targets,
        },
        membership,
    })
}

/// Fuses every actor forecast by any sub-model. All sub-models must cover
/// the same actors; the output follows the first sub-model's order.
pub fn fuse(models: &[SubmodelPrediction], seed: u64) -> Result<Vec<FusedActor>> {
    if models.is_empty() {
        return Err(Error::Ensemble("no sub-models to fuse".into()));
    }
    for m in models {
        m.validate()?;
    }
    let mut keys: Vec<(&str, &str)> = Vec::new();
    let mut seen = HashSet::new();
    for m in models {
        for f in &m.forecasts {
            let key = (f.scene_id.as_str(), f.actor_id.as_str());
            if seen.insert(key) {
                keys.push(key);
            }
        }
    }
    let index: Vec<HashMap<(&str, &str), &Forecast>> = models
        .iter()
        .map(|m| {
            m.forecasts
                .iter()
                .map(|f| ((f.scene_id.as_str(), f.actor_id.as_str()), f))
                .collect()
        })
        .collect();
    let mut missing = Vec::new();
    for key in &keys {
        for (m, idx) in models.iter().zip(&index) {
            if !idx.contains_key(key) {
                missing.push(format!("({}, {}/{})", m.model_id, key.0, key.1));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Ensemble(format!(
            "sub-models missing actors: {}",
            missing.join(", ")
        )));
    }
    keys.par_iter()
        .map(|key| {
            let members: Vec<(&Forecast, f64)> =
                models.iter().zip(&index).map(|(m, idx)| (idx[key], m.alpha)).collect();
            fuse_actor(&members, seed)
        })
        .collect()
}
