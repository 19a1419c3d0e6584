//! Metrics recomputed by brute force, and random inputs for them.

use banet::net_decoder::Forecast;
use banet::scene::Point;
use rand::Rng;

/// Metrics recomputed by enumerating every mode and sorting.
pub fn brute_force(f: &Forecast, gt: &[Point]) -> [f64; 8] {
    let d = |a: Point, b: Point| (a[0] - b[0]).hypot(a[1] - b[1]);
    let k = f.confidences.len();
    let fdes: Vec<f64> = f
        .trajectories
        .iter()
        .map(|m| d(*m.last().unwrap(), *gt.last().unwrap()))
        .collect();
    let ades: Vec<f64> = f
        .trajectories
        .iter()
        .map(|m| m.iter().zip(gt).map(|(a, b)| d(*a, *b)).sum::<f64>() / gt.len() as f64)
        .collect();
    let mut by_fde: Vec<usize> = (0..k).collect();
    by_fde.sort_by(|&a, &b| fdes[a].total_cmp(&fdes[b]).then(a.cmp(&b)));
    let mut by_ade: Vec<usize> = (0..k).collect();
    by_ade.sort_by(|&a, &b| ades[a].total_cmp(&ades[b]).then(a.cmp(&b)));
    let mut by_conf: Vec<usize> = (0..k).collect();
    by_conf.sort_by(|&a, &b| f.confidences[b].total_cmp(&f.confidences[a]).then(a.cmp(&b)));
    let (bf, ba, top) = (by_fde[0], by_ade[0], by_conf[0]);
    let sq = |p: f64| (1.0 - p) * (1.0 - p);
    [
        fdes[bf] + sq(f.confidences[bf]),
        fdes[bf],
        fdes[top],
        ades[ba] + sq(f.confidences[ba]),
        ades[ba],
        ades[top],
        if fdes[bf] > 2.0 { 1.0 } else { 0.0 },
        if fdes[top] > 2.0 { 1.0 } else { 0.0 },
    ]
}

pub fn random_pair(r: &mut impl Rng, t: usize) -> (Forecast, Vec<Point>) {
    let gt: Vec<Point> = (0..t)
        .map(|_| [r.random_range(-6.0..6.0), r.random_range(-6.0..6.0)])
        .collect();
    let trajs: Vec<Vec<Point>> = (0..6)
        .map(|_| {
            gt.iter()
                .map(|p| [p[0] + r.random_range(-3.0..3.0), p[1] + r.random_range(-3.0..3.0)])
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..6).map(|_| r.random_range(0.01..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let f = Forecast {
        scene_id: "s".into(),
        actor_id: "a".into(),
        targets: trajs.iter().map(|t| *t.last().unwrap()).collect(),
        trajectories: trajs,
        confidences: raw.iter().map(|c| c / z).collect(),
    };
    (f, gt)
}
