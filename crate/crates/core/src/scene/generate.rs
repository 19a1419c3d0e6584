use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    wrap_angle, ActorKind, ActorState, ActorTrack, BoundaryPolyline, Frame, Horizon, Lane, LaneGraphOptions, Marking,
    Point, Scene, Side,
};
use crate::error::{Error, Result};

/// Parameters of the synthetic road-scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub num_lanes: usize,
    pub lane_width: f64,
    pub lane_length: f64,
    /// Curvature range of the road reference arc, 1/m.
    pub curvature_range: [f64; 2],
    pub num_actors: usize,
    pub history: usize,
    pub future: usize,
    /// Seconds per step.
    pub dt: f64,
    pub speed_range: [f64; 2],
    pub noise_sigma: f64,
    pub lane_change_prob: f64,
    /// Probability that an inner boundary is a double (no-crossing) line.
    pub double_marking_prob: f64,
    /// Probability that a non-focal actor is missing a prefix of its history.
    pub partial_history_prob: f64,
    pub segment_len: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            num_lanes: 3,
            lane_width: 3.5,
            lane_length: 120.0,
            curvature_range: [-0.01, 0.01],
            num_actors: 4,
            history: 50,
            future: 60,
            dt: 0.1,
            speed_range: [4.0, 12.0],
            noise_sigma: 0.05,
            lane_change_prob: 0.3,
            double_marking_prob: 0.2,
            partial_history_prob: 0.3,
            segment_len: 2.0,
        }
    }
}

impl SceneGenConfig {
    /// Small horizons for fast tests and examples.
    pub fn desk() -> Self {
        Self {
            history: 10,
            future: 15,
            lane_length: 60.0,
            num_actors: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.history < 2 {
            return bad(format!("history must be >= 2, got {}", self.history));
        }
        if self.future < 1 {
            return bad(format!("future must be >= 1, got {}", self.future));
        }
        if self.num_lanes == 0 {
            return bad("num_lanes must be >= 1".into());
        }
        if self.num_actors == 0 {
            return bad("num_actors must be >= 1".into());
        }
        if !(self.lane_width > 0.0 && self.lane_length > 0.0 && self.dt > 0.0 && self.segment_len > 0.0) {
            return bad("lane_width, lane_length, dt and segment_len must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.speed_range[0] > 0.0 && self.speed_range[0] <= self.speed_range[1]) {
            return bad(format!("invalid speed_range {:?}", self.speed_range));
        }
        if self.curvature_range[0] > self.curvature_range[1] {
            return bad(format!("invalid curvature_range {:?}", self.curvature_range));
        }
        for (name, p) in [
            ("lane_change_prob", self.lane_change_prob),
            ("double_marking_prob", self.double_marking_prob),
            ("partial_history_prob", self.partial_history_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

/// Circular (or straight) reference arc; lanes are its parallel offsets.
struct Road {
    origin: Point,
    heading: f64,
    curvature: f64,
}

impl Road {
    fn point(&self, s: f64, lateral: f64) -> Point {
        let (h0, k) = (self.heading, self.curvature);
        let base = if k.abs() < 1e-12 {
            [self.origin[0] + s * h0.cos(), self.origin[1] + s * h0.sin()]
        } else {
            [
                self.origin[0] + ((h0 + k * s).sin() - h0.sin()) / k,
                self.origin[1] - ((h0 + k * s).cos() - h0.cos()) / k,
            ]
        };
        let h = h0 + k * s;
        [base[0] - lateral * h.sin(), base[1] + lateral * h.cos()]
    }
}

fn smoothstep(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        0.5 * (1.0 - (PI * u).cos())
    }
}

struct Motion {
    s0: f64,
    speed: f64,
    from_offset: f64,
    to_offset: f64,
    change_start: f64,
    change_duration: f64,
}

impl Motion {
    fn position(&self, road: &Road, t: f64) -> Point {
        let u = (t - self.change_start) / self.change_duration;
        let lateral = self.from_offset + (self.to_offset - self.from_offset) * smoothstep(u);
        road.point(self.s0 + self.speed * t, lateral)
    }
}

/// Generates a road with `num_lanes` parallel lanes (and their boundaries) and
/// actors driving along them, some changing lanes across dashed boundaries.
/// Pure function of `(config, seed)`.
pub fn generate_synthetic(config: &SceneGenConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let road = Road {
        origin: [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)],
        heading: wrap_angle(rng.random_range(-PI..PI)),
        curvature: if config.curvature_range[0] < config.curvature_range[1] {
            rng.random_range(config.curvature_range[0]..config.curvature_range[1])
        } else {
            config.curvature_range[0]
        },
    };
    let w = config.lane_width;
    let lane_offset = |i: usize| (i as f64 - (config.num_lanes as f64 - 1.0) / 2.0) * w;

    // inner[i] separates lane i (right) from lane i + 1 (left)
    let inner: Vec<Marking> = (0..config.num_lanes.saturating_sub(1))
        .map(|_| {
            if rng.random_bool(config.double_marking_prob) {
                Marking::Double
            } else {
                Marking::Dashed
            }
        })
        .collect();

    let samples = config.lane_length.ceil() as usize;
    let polyline = |lateral: f64| -> Vec<Point> {
        (0..=samples)
            .map(|k| road.point((k as f64).min(config.lane_length), lateral))
            .collect()
    };
    let mut lanes = Vec::new();
    let mut boundaries = Vec::new();
    for i in 0..config.num_lanes {
        let id = format!("lane_{i}");
        lanes.push(Lane {
            id: id.clone(),
            centerline: polyline(lane_offset(i)),
        });
        let left_marking = if i + 1 == config.num_lanes {
            Marking::Solid
        } else {
            inner[i]
        };
        let right_marking = if i == 0 { Marking::Solid } else { inner[i - 1] };
        for (side, marking, lateral) in [
            (Side::Left, left_marking, lane_offset(i) + w / 2.0),
            (Side::Right, right_marking, lane_offset(i) - w / 2.0),
        ] {
            boundaries.push(BoundaryPolyline {
                points: polyline(lateral),
                marking,
                side,
                lane_id: id.clone(),
                matched_lane_nodes: Vec::new(),
            });
        }
    }

    let (hist, fut, dt) = (config.history, config.future, config.dt);
    let mut actors = Vec::with_capacity(config.num_actors);
    for a in 0..config.num_actors {
        let lane = rng.random_range(0..config.num_lanes);
        let mut target = lane;
        if rng.random_bool(config.lane_change_prob) {
            let mut options = Vec::new();
            if lane + 1 < config.num_lanes && inner[lane] == Marking::Dashed {
                options.push(lane + 1);
            }
            if lane > 0 && inner[lane - 1] == Marking::Dashed {
                options.push(lane - 1);
            }
            if !options.is_empty() {
                target = options[rng.random_range(0..options.len())];
            }
        }
        let horizon_s = (hist + fut) as f64 * dt;
        let motion = Motion {
            s0: rng.random_range(0.15..0.45) * config.lane_length,
            speed: rng.random_range(config.speed_range[0]..=config.speed_range[1]),
            from_offset: lane_offset(lane),
            to_offset: lane_offset(target),
            change_start: rng.random_range(-0.3 * horizon_s..0.3 * horizon_s),
            change_duration: 3.0,
        };
        let missing = if a > 0 && rng.random_bool(config.partial_history_prob) {
            rng.random_range(1..=hist / 2)
        } else {
            0
        };

        let mut history = Vec::with_capacity(hist);
        let mut observed = Vec::with_capacity(hist);
        for h in 0..hist {
            let t = (h as f64 - (hist - 1) as f64) * dt;
            if h < missing {
                history.push(ActorState::default());
                observed.push(false);
                continue;
            }
            let eps = 1e-3;
            let p0 = motion.position(&road, t - eps);
            let p1 = motion.position(&road, t + eps);
            let velocity = [(p1[0] - p0[0]) / (2.0 * eps), (p1[1] - p0[1]) / (2.0 * eps)];
            let p = motion.position(&road, t);
            history.push(ActorState {
                position: [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)],
                heading: wrap_angle(velocity[1].atan2(velocity[0])),
                velocity,
            });
            observed.push(true);
        }
        let future = (1..=fut)
            .map(|f| {
                let p = motion.position(&road, f as f64 * dt);
                [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]
            })
            .collect();
        actors.push(ActorTrack {
            id: format!("actor_{a}"),
            kind: ActorKind::Vehicle,
            history,
            observed,
            future_gt: Some(future),
            is_focal: a == 0,
        });
    }

    let options = LaneGraphOptions {
        segment_len: config.segment_len,
        lateral_max_dist: 1.2 * w,
        ..LaneGraphOptions::default()
    };
    Scene::new(
        format!("scene_{seed}"),
        Horizon {
            history: hist,
            future: fut,
        },
        actors,
        lanes,
        boundaries,
        Frame::World,
        options,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SceneGenConfig::desk();
        for cfg in [
            SceneGenConfig {
                history: 1,
                ..base.clone()
            },
            SceneGenConfig {
                future: 0,
                ..base.clone()
            },
            SceneGenConfig {
                num_lanes: 0,
                ..base.clone()
            },
            SceneGenConfig {
                noise_sigma: -1.0,
                ..base.clone()
            },
        ] {
            assert!(matches!(generate_synthetic(&cfg, 1), Err(Error::Config(_))));
        }
    }

    #[test]
    fn lane_changes_only_cross_dashed_boundaries() {
        let cfg = SceneGenConfig {
            num_lanes: 2,
            double_marking_prob: 1.0,
            lane_change_prob: 1.0,
            noise_sigma: 0.0,
            ..SceneGenConfig::desk()
        };
        let scene = generate_synthetic(&cfg, 5).unwrap();
        // with a double line nobody may leave their lane: final lateral offset stays at ±1.75
        let road_lanes: Vec<_> = scene.lanes.iter().map(|l| l.centerline.clone()).collect();
        for actor in &scene.actors {
            let end = *actor.future_gt.as_ref().unwrap().last().unwrap();
            let on_some_lane = road_lanes.iter().any(|c| {
                c.windows(2)
                    .any(|w| super::super::normalize::point_segment_distance(end, w[0], w[1]) < 1e-2)
            });
            assert!(on_some_lane, "actor {} left its lane", actor.id);
        }
    }
}
