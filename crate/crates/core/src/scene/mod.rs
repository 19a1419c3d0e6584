//! Vectorized scenes: actors with observed history and ground-truth future,
//! a lane-centerline node graph with typed adjacency, and lane boundary
//! polylines carrying marking types.

mod generate;
mod io;
mod lane_graph;
mod normalize;

pub use generate::{generate_synthetic, SceneGenConfig};
pub use io::{load_scene, load_scene_file, save_scene, save_scene_file};
pub use lane_graph::{build_lane_nodes, resample_polyline, LaneGraphOptions, PolylineNode};
pub use normalize::{agent_transform, normalize, RigidTransform};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorKind {
    Vehicle,
    Pedestrian,
    Cyclist,
    Other,
}

/// One observed history step. Unobserved steps are zero-filled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActorState {
    pub position: Point,
    pub heading: f64,
    pub velocity: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorTrack {
    pub id: String,
    pub kind: ActorKind,
    pub history: Vec<ActorState>,
    pub observed: Vec<bool>,
    pub future_gt: Option<Vec<Point>>,
    pub is_focal: bool,
}

impl ActorTrack {
    pub fn last_observed(&self) -> bool {
        self.observed.last().copied().unwrap_or(false)
    }

    /// Position at the last history step.
    pub fn current_position(&self) -> Point {
        self.history.last().map_or([0.0; 2], |s| s.position)
    }

    /// Final ground-truth position, the regression target of the first decoder stage.
    pub fn gt_target(&self) -> Option<Point> {
        self.future_gt.as_ref().and_then(|f| f.last().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneNode {
    pub center: Point,
    pub direction: Point,
    pub length: f64,
    pub parent_lane: String,
}

/// Lane-graph adjacency categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Adjacency {
    Predecessor,
    Successor,
    Left,
    Right,
}

impl Adjacency {
    pub const ALL: [Adjacency; 4] = [
        Adjacency::Predecessor,
        Adjacency::Successor,
        Adjacency::Left,
        Adjacency::Right,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Adjacency::Predecessor => "pre",
            Adjacency::Successor => "suc",
            Adjacency::Left => "left",
            Adjacency::Right => "right",
        }
    }
}

/// Lane nodes plus directed edges per category. An edge `(i, j)` in category
/// `c` means node `j` is the `c`-neighbor of node `i`, so `i` aggregates from `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LaneGraph {
    pub nodes: Vec<LaneNode>,
    pub adjacency: [Vec<(usize, usize)>; 4],
    /// Centerlines dropped because they had zero length.
    pub degenerate_skipped: usize,
}

impl LaneGraph {
    pub fn edges(&self, kind: Adjacency) -> &[(usize, usize)] {
        &self.adjacency[kind.index()]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for kind in Adjacency::ALL {
            for &(i, j) in self.edges(kind) {
                if i >= n || j >= n {
                    return Err(Error::contract(format!(
                        "{} edge ({i},{j}) out of range {n}",
                        kind.name()
                    )));
                }
                if i == j {
                    return Err(Error::contract(format!("{} self-edge at {i}", kind.name())));
                }
            }
        }
        let left = self.edges(Adjacency::Left);
        let right = self.edges(Adjacency::Right);
        let symmetric =
            left.iter().all(|&(i, j)| right.contains(&(j, i))) && right.iter().all(|&(i, j)| left.contains(&(j, i)));
        if !symmetric {
            return Err(Error::contract("left/right adjacency is not symmetric"));
        }
        Ok(())
    }

    /// Reorders nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> LaneGraph {
        let mut nodes = self.nodes.clone();
        for (old, &new) in perm.iter().enumerate() {
            nodes[new] = self.nodes[old].clone();
        }
        let mut adjacency: [Vec<(usize, usize)>; 4] = Default::default();
        for kind in Adjacency::ALL {
            adjacency[kind.index()] = self.edges(kind).iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        }
        LaneGraph {
            nodes,
            adjacency,
            degenerate_skipped: self.degenerate_skipped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marking {
    Solid,
    Dashed,
    Double,
    None,
}

impl Marking {
    pub const ALL: [Marking; 4] = [Marking::Solid, Marking::Dashed, Marking::Double, Marking::None];

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self as usize] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: String,
    pub centerline: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPolyline {
    pub points: Vec<Point>,
    pub marking: Marking,
    pub side: Side,
    pub lane_id: String,
    /// Lane nodes of `lane_id`, derived from the lane graph.
    pub matched_lane_nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    World,
    AgentCentric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizon {
    #[serde(rename = "H")]
    pub history: usize,
    #[serde(rename = "T")]
    pub future: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub horizon: Horizon,
    pub actors: Vec<ActorTrack>,
    pub lanes: Vec<Lane>,
    pub lane_graph: LaneGraph,
    pub boundaries: Vec<BoundaryPolyline>,
    pub frame: Frame,
    pub graph_options: LaneGraphOptions,
}

fn invalid(field: String, message: impl Into<String>) -> Error {
    Error::Parse {
        field,
        message: message.into(),
    }
}

fn check_point(field: String, p: &Point) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(field, "non-finite coordinate"))
    }
}

impl Scene {
    /// Assembles a scene, deriving the lane graph and boundary matching, and
    /// checks every invariant.
    pub fn new(
        id: impl Into<String>,
        horizon: Horizon,
        actors: Vec<ActorTrack>,
        lanes: Vec<Lane>,
        boundaries: Vec<BoundaryPolyline>,
        frame: Frame,
        graph_options: LaneGraphOptions,
    ) -> Result<Scene> {
        let lane_graph = build_lane_nodes(&lanes, &graph_options)?;
        let mut scene = Scene {
            id: id.into(),
            horizon,
            actors,
            lanes,
            lane_graph,
            boundaries,
            frame,
            graph_options,
        };
        scene.match_boundaries();
        scene.validate()?;
        Ok(scene)
    }

    fn match_boundaries(&mut self) {
        for b in &mut self.boundaries {
            b.matched_lane_nodes = self
                .lane_graph
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| n.parent_lane == b.lane_id)
                .map(|(i, _)| i)
                .collect();
        }
    }

    pub fn actor(&self, id: &str) -> Option<&ActorTrack> {
        self.actors.iter().find(|a| a.id == id)
    }

    pub fn focal_actors(&self) -> impl Iterator<Item = &ActorTrack> {
        self.actors.iter().filter(|a| a.is_focal)
    }

    pub fn validate(&self) -> Result<()> {
        let Horizon { history, future } = self.horizon;
        if history < 2 || future < 1 {
            return Err(invalid(
                "horizon".into(),
                format!("need H >= 2 and T >= 1, got H={history} T={future}"),
            ));
        }
        if !self.actors.iter().any(|a| a.is_focal) {
            return Err(invalid("actors".into(), "scene has no focal actor"));
        }
        for (ai, a) in self.actors.iter().enumerate() {
            let f = |s: &str| format!("actors[{ai}].{s}");
            if a.history.len() != history {
                return Err(invalid(
                    f("history"),
                    format!("expected {history} steps, got {}", a.history.len()),
                ));
            }
            if a.observed.len() != history {
                return Err(invalid(
                    f("observed"),
                    format!("expected {history} flags, got {}", a.observed.len()),
                ));
            }
            if !a.observed.iter().any(|&o| o) {
                return Err(invalid(f("observed"), "no observed step"));
            }
            for (t, s) in a.history.iter().enumerate() {
                let field = format!("actors[{ai}].history[{t}]");
                check_point(field.clone(), &s.position)?;
                check_point(field.clone(), &s.velocity)?;
                if !(s.heading > -std::f64::consts::PI && s.heading <= std::f64::consts::PI) {
                    return Err(invalid(field, format!("heading {} outside (-pi, pi]", s.heading)));
                }
            }
            if let Some(fut) = &a.future_gt {
                if fut.len() != future {
                    return Err(invalid(
                        f("future"),
                        format!("expected {future} steps, got {}", fut.len()),
                    ));
                }
                for (t, p) in fut.iter().enumerate() {
                    check_point(format!("actors[{ai}].future[{t}]"), p)?;
                }
            }
        }
        for (li, lane) in self.lanes.iter().enumerate() {
            for (k, p) in lane.centerline.iter().enumerate() {
                check_point(format!("lanes[{li}].centerline[{k}]"), p)?;
            }
        }
        for (bi, b) in self.boundaries.iter().enumerate() {
            if b.points.len() < 2 {
                return Err(invalid(format!("boundaries[{bi}].points"), "fewer than 2 points"));
            }
            for (k, p) in b.points.iter().enumerate() {
                check_point(format!("boundaries[{bi}].points[{k}]"), p)?;
            }
            if !self.lanes.iter().any(|l| l.id == b.lane_id) {
                return Err(invalid(
                    format!("boundaries[{bi}].lane_id"),
                    format!("unknown lane `{}`", b.lane_id),
                ));
            }
            if b.matched_lane_nodes.iter().any(|&i| i >= self.lane_graph.len()) {
                return Err(invalid(
                    format!("boundaries[{bi}].lane_id"),
                    "matched node out of range",
                ));
            }
        }
        self.lane_graph.validate()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}
