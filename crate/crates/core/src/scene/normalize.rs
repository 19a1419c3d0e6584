use super::{build_lane_nodes, wrap_angle, ActorState, Frame, Point, Scene};
use crate::error::{Error, Result};

/// Rigid 2-D transform mapping world coordinates into an actor's frame:
/// `p' = R(-heading) (p - origin)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub origin: Point,
    pub heading: f64,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        origin: [0.0, 0.0],
        heading: 0.0,
    };

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.origin[0], p[1] - self.origin[1]);
        // + 0.0 folds -0.0 into +0.0
        [c * dx + s * dy + 0.0, -s * dx + c * dy + 0.0]
    }

    pub fn rotate(&self, v: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1] + 0.0, -s * v[0] + c * v[1] + 0.0]
    }

    /// Maps actor-frame coordinates back to the world frame.
    pub fn invert(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [
            c * p[0] - s * p[1] + self.origin[0],
            s * p[0] + c * p[1] + self.origin[1],
        ]
    }

    pub fn apply_heading(&self, h: f64) -> f64 {
        wrap_angle(h - self.heading)
    }
}

/// The transform that `normalize(scene, actor_id)` applies.
pub fn agent_transform(scene: &Scene, actor_id: &str) -> Result<RigidTransform> {
    let actor = scene
        .actor(actor_id)
        .ok_or_else(|| Error::Normalization(format!("actor `{actor_id}` not in scene `{}`", scene.id)))?;
    if !actor.last_observed() {
        return Err(Error::Normalization(format!(
            "actor `{actor_id}` is not observed at the last history step"
        )));
    }
    let last = actor.history.last().expect("validated history");
    Ok(RigidTransform {
        origin: last.position,
        heading: last.heading,
    })
}

/// Re-expresses the whole scene in the frame of `actor_id`: its last observed
/// position at the origin, its heading along +x.
pub fn normalize(scene: &Scene, actor_id: &str) -> Result<Scene> {
    let tf = agent_transform(scene, actor_id)?;
    let mut out = scene.clone();
    for actor in &mut out.actors {
        for (state, &obs) in actor.history.iter_mut().zip(&actor.observed) {
            if obs {
                *state = ActorState {
                    position: tf.apply(state.position),
                    heading: tf.apply_heading(state.heading),
                    velocity: tf.rotate(state.velocity),
                };
            }
        }
        if let Some(f) = &mut actor.future_gt {
            f.iter_mut().for_each(|p| *p = tf.apply(*p));
        }
    }
    for lane in &mut out.lanes {
        lane.centerline.iter_mut().for_each(|p| *p = tf.apply(*p));
    }
    for b in &mut out.boundaries {
        b.points.iter_mut().for_each(|p| *p = tf.apply(*p));
    }
    out.lane_graph = build_lane_nodes(&out.lanes, &out.graph_options)?;
    out.frame = Frame::AgentCentric(actor_id.to_string());
    Ok(out)
}

#[cfg(test)]
pub(crate) fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let u = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (ap[0] - u * ab[0]).hypot(ap[1] - u * ab[1])
}
