//! The four sub-fusion blocks: boundary to lane by matching, then lane to
//! actor, boundary to actor and actor to actor by distance attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Var};
use crate::error::{Error, Result};
use crate::nn::{Fwd, Init, Linear, Mlp};
use crate::scene::{BoundaryPolyline, Frame, Point};

/// Positions tagged with the frame they are expressed in.
#[derive(Debug, Clone, Copy)]
pub struct Framed<'a> {
    pub frame: &'a Frame,
    pub points: &'a [Point],
}

impl<'a> Framed<'a> {
    pub fn new(frame: &'a Frame, points: &'a [Point]) -> Self {
        Self { frame, points }
    }
}

/// Query/context pairs `(i, j)` with `|q_i - c_j| < tau`, ordered by `i` then `j`.
pub fn neighbor_pairs(query: &[Point], context: &[Point], tau: f64, exclude_self: bool) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, q) in query.iter().enumerate() {
        for (j, c) in context.iter().enumerate() {
            if exclude_self && i == j {
                continue;
            }
            if (q[0] - c[0]).hypot(q[1] - c[1]) < tau {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Distance attention: every context node within `tau` of a query sends
/// `relu(W_ctx (phi(p_j - p_i) ++ c_j) + W_q q_i)`; the summed messages pass
/// through `W_out` and are added to the query before a layer norm.
#[derive(Debug, Clone)]
pub struct DistanceAttention {
    pub query: Linear,
    pub rel: Linear,
    pub context: Linear,
    pub out: Linear,
    pub tau: f64,
    /// Skip `i == j` pairs when queries and contexts are the same set.
    pub exclude_self: bool,
    pub coord_scale: f64,
}

impl DistanceAttention {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        d: usize,
        tau: f64,
        exclude_self: bool,
        coord_scale: f64,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "{name}: distance threshold must be > 0, got {tau}"
            )));
        }
        Ok(Self {
            query: Linear::new(init, &format!("{name}.query"), d, d, false)?,
            rel: Linear::new(init, &format!("{name}.rel"), 2, d, true)?,
            context: Linear::new(init, &format!("{name}.context"), 2 * d, d, true)?,
            out: Linear::new(init, &format!("{name}.out"), d, d, false)?,
            tau,
            exclude_self,
            coord_scale,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, q: Var, qpos: Framed, ctx: Var, cpos: Framed) -> Result<Var> {
        if qpos.frame != cpos.frame {
            return Err(Error::contract(format!(
                "distance attention across frames {:?} and {:?}",
                qpos.frame, cpos.frame
            )));
        }
        let nq = f.tape.shape(q)[0];
        if qpos.points.len() != nq || cpos.points.len() != f.tape.shape(ctx)[0] {
            return Err(Error::contract("positions do not match feature rows"));
        }
        let pairs = neighbor_pairs(qpos.points, cpos.points, self.tau, self.exclude_self);
        if pairs.is_empty() {
            return f.ln(q);
        }
        let (qi, cj): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let mut delta = Vec::with_capacity(2 * pairs.len());
        for &(i, j) in &pairs {
            let (a, b) = (qpos.points[i], cpos.points[j]);
            delta.push((b[0] - a[0]) / self.coord_scale);
            delta.push((b[1] - a[1]) / self.coord_scale);
        }
        let delta = f.constant(&[pairs.len(), 2], &delta)?;
        let rel = self.rel.forward(f, delta)?;
        let c = f.tape.gather(ctx, &cj)?;
        let m = f.tape.concat(&[rel, c], 1)?;
        let m = self.context.forward(f, m)?;
        let wq = self.query.forward(f, q)?;
        let wq = f.tape.gather(wq, &qi)?;
        let m = f.tape.add(m, wq)?;
        let m = f.tape.relu(m);
        let agg = f.tape.scatter_add(m, &qi, nq)?;
        let agg = self.out.forward(f, agg)?;
        let y = f.tape.add(q, agg)?;
        f.ln(y)
    }
}

/// For each lane node, the boundary nodes matched to it: for every polyline
/// that lists the lane node in its matching, that polyline's nearest node.
/// `node_polyline[b]` and `node_positions[b]` describe boundary node `b`.
pub fn boundary_lane_matching(
    lane_positions: &[Point],
    polylines: &[BoundaryPolyline],
    node_polyline: &[usize],
    node_positions: &[Point],
) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); lane_positions.len()];
    for (p, poly) in polylines.iter().enumerate() {
        let nodes: Vec<usize> = (0..node_polyline.len()).filter(|&b| node_polyline[b] == p).collect();
        for &lane in &poly.matched_lane_nodes {
            let Some(target) = lane_positions.get(lane) else {
                continue;
            };
            let nearest = nodes.iter().copied().min_by(|&a, &b| {
                let da = (node_positions[a][0] - target[0]).hypot(node_positions[a][1] - target[1]);
                let db = (node_positions[b][0] - target[0]).hypot(node_positions[b][1] - target[1]);
                da.total_cmp(&db)
            });
            if let Some(b) = nearest {
                out[lane].push(b);
            }
        }
    }
    out
}

/// Boundary-to-lane block: each lane node averages its matched boundary
/// features, concatenates the mean to its own feature, and adds the MLP of
/// the pair as a residual before a layer norm.
#[derive(Debug, Clone)]
pub struct BoundaryToLane {
    pub mlp: Mlp,
}

impl BoundaryToLane {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(init, &format!("{name}.mlp"), 2 * d, d, d)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, lane: Var, boundary: Var, matching: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = (f.tape.shape(lane)[0], f.tape.shape(lane)[1]);
        let nb = f.tape.shape(boundary)[0];
        if matching.len() != n {
            return Err(Error::contract(format!(
                "matching has {} rows for {n} lane nodes",
                matching.len()
            )));
        }
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut inv = vec![0.0; n];
        for (i, m) in matching.iter().enumerate() {
            let mut m = m.clone();
            m.sort_unstable();
            m.dedup();
            if let Some(&bad) = m.iter().find(|&&b| b >= nb) {
                return Err(Error::contract(format!("boundary node {bad} out of range {nb}")));
            }
            if !m.is_empty() {
                inv[i] = 1.0 / m.len() as f64;
            }
            rows.extend(std::iter::repeat_n(i, m.len()));
            cols.extend(m);
        }
        let ctx = if cols.is_empty() {
            f.constant(&[n, d], &vec![0.0; n * d])?
        } else {
            let g = f.tape.gather(boundary, &cols)?;
            let s = f.tape.scatter_add(g, &rows, n)?;
            let inv = f.constant(&[n], &inv)?;
            f.tape.scale_rows(s, inv)?
        };
        let x = f.tape.concat(&[lane, ctx], 1)?;
        let h = self.mlp.forward(f, x)?;
        let y = f.tape.add(lane, h)?;
        f.ln(y)
    }
}

/// Distance thresholds of the three attention blocks, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub lane_actor: f64,
    pub boundary_actor: f64,
    pub actor_actor: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            lane_actor: 10.0,
            boundary_actor: 10.0,
            actor_actor: 30.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    pub boundary_lane: BoundaryToLane,
    pub lane_actor: DistanceAttention,
    pub boundary_actor: DistanceAttention,
    pub actor_actor: DistanceAttention,
}

/// Everything the fusion stack reads besides the features themselves.
#[derive(Debug, Clone, Copy)]
pub struct FusionGeometry<'a> {
    pub actors: Framed<'a>,
    pub lanes: Framed<'a>,
    pub boundaries: Framed<'a>,
    pub matching: &'a [Vec<usize>],
}

impl FusionNet {
    pub fn new<T: Real, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        d: usize,
        tau: Thresholds,
        coord_scale: f64,
    ) -> Result<Self> {
        Ok(Self {
            boundary_lane: BoundaryToLane::new(init, &format!("{name}.boundary_lane"), d)?,
            lane_actor: DistanceAttention::new(
                init,
                &format!("{name}.lane_actor"),
                d,
                tau.lane_actor,
                false,
                coord_scale,
            )?,
            boundary_actor: DistanceAttention::new(
                init,
                &format!("{name}.boundary_actor"),
                d,
                tau.boundary_actor,
                false,
                coord_scale,
            )?,
            actor_actor: DistanceAttention::new(
                init,
                &format!("{name}.actor_actor"),
                d,
                tau.actor_actor,
                true,
                coord_scale,
            )?,
        })
    }

    /// Applies boundary to lane, lane to actor, boundary to actor and actor to
    /// actor, in that order, and returns the updated actor features.
    pub fn forward<T: Real>(
        &self,
        f: &mut Fwd<T>,
        actor: Var,
        lane: Var,
        boundary: Var,
        geo: &FusionGeometry,
    ) -> Result<Var> {
        let lane = self.boundary_lane.forward(f, lane, boundary, geo.matching)?;
        let actor = self.lane_actor.forward(f, actor, geo.actors, lane, geo.lanes)?;
        let actor = self
            .boundary_actor
            .forward(f, actor, geo.actors, boundary, geo.boundaries)?;
        self.actor_actor.forward(f, actor, geo.actors, actor, geo.actors)
    }
}
