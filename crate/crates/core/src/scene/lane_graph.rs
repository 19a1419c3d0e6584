use std::collections::BTreeSet;

use super::{Adjacency, Lane, LaneGraph, LaneNode, Point};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneGraphOptions {
    /// Target node length along a centerline, meters.
    pub segment_len: f64,
    /// Maximum center distance for a left/right edge, meters.
    pub lateral_max_dist: f64,
    /// Minimum `|cos|` between node directions for a left/right edge.
    pub lateral_min_alignment: f64,
}

impl Default for LaneGraphOptions {
    fn default() -> Self {
        Self {
            segment_len: 2.0,
            lateral_max_dist: 1.2 * 3.5,
            lateral_min_alignment: 0.8,
        }
    }
}

/// A resampled piece of a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolylineNode {
    pub center: Point,
    pub direction: Point,
    pub length: f64,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

fn point_at(points: &[Point], cum: &[f64], s: f64) -> Point {
    let k = match cum.iter().position(|&c| c >= s) {
        Some(0) => 1,
        Some(k) => k,
        None => cum.len() - 1,
    };
    let seg = cum[k] - cum[k - 1];
    let u = if seg > 0.0 {
        ((s - cum[k - 1]) / seg).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (a, b) = (points[k - 1], points[k]);
    [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
}

/// Splits a polyline into `round(length / segment_len)` equal-arclength pieces
/// (at least one). Returns `None` for a zero-length polyline.
pub fn resample_polyline(points: &[Point], segment_len: f64) -> Option<Vec<PolylineNode>> {
    if points.len() < 2 {
        return None;
    }
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + norm(sub(w[1], w[0])));
    }
    let total = *cum.last().unwrap();
    if total <= 0.0 {
        return None;
    }
    let count = ((total / segment_len).round() as usize).max(1);
    let piece = total / count as f64;
    let nodes = (0..count)
        .map(|k| {
            let s0 = k as f64 * piece;
            let a = point_at(points, &cum, s0);
            let b = point_at(points, &cum, s0 + piece);
            let center = point_at(points, &cum, s0 + 0.5 * piece);
            let d = sub(b, a);
            let len = norm(d);
            PolylineNode {
                center,
                direction: [d[0] / len, d[1] / len],
                length: piece,
            }
        })
        .collect();
    Some(nodes)
}

/// Discretizes lane centerlines into nodes and links them: successor edges
/// along each lane, predecessor edges as their reverse, and left/right edges
/// between the nearest aligned nodes of neighboring lanes.
pub fn build_lane_nodes(lanes: &[Lane], opts: &LaneGraphOptions) -> Result<LaneGraph> {
    if !(opts.segment_len > 0.0) {
        return Err(Error::Config(format!(
            "segment_len must be > 0, got {}",
            opts.segment_len
        )));
    }
    let mut graph = LaneGraph::default();
    let mut lane_of = Vec::new();
    for (li, lane) in lanes.iter().enumerate() {
        let Some(pieces) = resample_polyline(&lane.centerline, opts.segment_len) else {
            graph.degenerate_skipped += 1;
            continue;
        };
        let start = graph.nodes.len();
        for (k, p) in pieces.into_iter().enumerate() {
            if k > 0 {
                let i = start + k - 1;
                graph.adjacency[Adjacency::Successor.index()].push((i, i + 1));
                graph.adjacency[Adjacency::Predecessor.index()].push((i + 1, i));
            }
            graph.nodes.push(LaneNode {
                center: p.center,
                direction: p.direction,
                length: p.length,
                parent_lane: lane.id.clone(),
            });
            lane_of.push(li);
        }
    }

    let mut left = BTreeSet::new();
    let mut right = BTreeSet::new();
    let nodes = &graph.nodes;
    for (i, ni) in nodes.iter().enumerate() {
        let mut best_left: Option<(f64, usize)> = None;
        let mut best_right: Option<(f64, usize)> = None;
        for (j, nj) in nodes.iter().enumerate() {
            if lane_of[i] == lane_of[j] {
                continue;
            }
            let align = ni.direction[0] * nj.direction[0] + ni.direction[1] * nj.direction[1];
            let offset = sub(nj.center, ni.center);
            let dist = norm(offset);
            if align.abs() <= opts.lateral_min_alignment || dist >= opts.lateral_max_dist {
                continue;
            }
            let cross = ni.direction[0] * offset[1] - ni.direction[1] * offset[0];
            let slot = if cross > 0.0 {
                &mut best_left
            } else if cross < 0.0 {
                &mut best_right
            } else {
                continue;
            };
            if slot.is_none_or(|(d, _)| dist < d) {
                *slot = Some((dist, j));
            }
        }
        if let Some((_, j)) = best_left {
            left.insert((i, j));
            right.insert((j, i));
        }
        if let Some((_, j)) = best_right {
            right.insert((i, j));
            left.insert((j, i));
        }
    }
    graph.adjacency[Adjacency::Left.index()] = left.into_iter().collect();
    graph.adjacency[Adjacency::Right.index()] = right.into_iter().collect();
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(id: &str, y: f64, len: f64) -> Lane {
        Lane {
            id: id.into(),
            centerline: (0..=len as usize).map(|x| [x as f64, y]).collect(),
        }
    }

    #[test]
    fn ten_meter_lane_gives_five_nodes() {
        let g = build_lane_nodes(&[straight("a", 0.0, 10.0)], &LaneGraphOptions::default()).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g.edges(Adjacency::Successor).len(), 4);
        assert_eq!(g.edges(Adjacency::Predecessor).len(), 4);
        assert!(g.edges(Adjacency::Left).is_empty());
        assert!(g.edges(Adjacency::Right).is_empty());
        for (k, n) in g.nodes.iter().enumerate() {
            assert!((n.center[0] - (1.0 + 2.0 * k as f64)).abs() < 1e-12);
            assert!((n.length - 2.0).abs() < 1e-12);
            assert!((norm(n.direction) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_lane_successors_form_a_path() {
        let g = build_lane_nodes(&[straight("a", 0.0, 30.0)], &LaneGraphOptions::default()).unwrap();
        let suc = g.edges(Adjacency::Successor);
        assert_eq!(suc.len(), g.len() - 1);
        for (k, &(i, j)) in suc.iter().enumerate() {
            assert_eq!((i, j), (k, k + 1));
        }
    }

    #[test]
    fn parallel_lanes_are_laterally_symmetric() {
        let lanes = [straight("a", 0.0, 20.0), straight("b", 3.5, 20.0)];
        let g = build_lane_nodes(&lanes, &LaneGraphOptions::default()).unwrap();
        g.validate().unwrap();
        let left = g.edges(Adjacency::Left);
        assert_eq!(left.len(), 10);
        for &(i, j) in left {
            assert!(g.edges(Adjacency::Right).contains(&(j, i)));
            assert_eq!(g.nodes[i].parent_lane, "a");
            assert_eq!(g.nodes[j].parent_lane, "b");
        }
    }

    #[test]
    fn distant_or_crossing_lanes_are_not_linked() {
        let far = [straight("a", 0.0, 20.0), straight("b", 10.0, 20.0)];
        let g = build_lane_nodes(&far, &LaneGraphOptions::default()).unwrap();
        assert!(g.edges(Adjacency::Left).is_empty());
        let crossing = Lane {
            id: "c".into(),
            centerline: (0..=20).map(|y| [10.0, y as f64 - 10.0]).collect(),
        };
        let g = build_lane_nodes(&[straight("a", 0.0, 20.0), crossing], &LaneGraphOptions::default()).unwrap();
        assert!(g.edges(Adjacency::Left).is_empty());
        assert!(g.edges(Adjacency::Right).is_empty());
    }

    #[test]
    fn degenerate_polylines_are_counted() {
        let lanes = [
            straight("a", 0.0, 10.0),
            Lane {
                id: "z".into(),
                centerline: vec![[1.0, 1.0], [1.0, 1.0]],
            },
        ];
        let g = build_lane_nodes(&lanes, &LaneGraphOptions::default()).unwrap();
        assert_eq!(g.degenerate_skipped, 1);
        assert_eq!(g.len(), 5);
    }

    #[test]
    fn non_positive_segment_length_is_rejected() {
        let opts = LaneGraphOptions {
            segment_len: 0.0,
            ..Default::default()
        };
        assert!(build_lane_nodes(&[straight("a", 0.0, 10.0)], &opts).is_err());
    }
}
