//! Encoders for the three vectorized input streams: actor histories, the
//! lane-centerline graph and lane-boundary nodes.

use rand::Rng;

use crate::diffcore::{ParamId, Real, Var};
use crate::error::{Error, Result};
use crate::nn::{upsample, Conv1d, Fwd, Init, Mlp, ResBlock1d, LN_EPS};
use crate::scene::{resample_polyline, Adjacency, LaneGraph, Marking, Point, Scene};

/// Added to features at unobserved steps before the temporal max.
const MASK_FILL: f64 = -1e4;

pub const LANE_FEATURES: usize = 5;
pub const BOUNDARY_FEATURES: usize = 8;

// ---- actors ----------------------------------------------------------------

/// Per-actor history channels, each `[A, C, H]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorInputs {
    pub count: usize,
    pub history: usize,
    /// `(x, y)` scaled by the coordinate scale, plus the observed flag.
    pub coord: Vec<f64>,
    /// `(cos, sin)` of the heading.
    pub heading: Vec<f64>,
    /// Velocity scaled by the coordinate scale.
    pub velocity: Vec<f64>,
    pub observed: Vec<bool>,
    /// Last observed position of each actor, meters.
    pub positions: Vec<Point>,
}

/// Builds actor encoder inputs from a (normalized) scene.
pub fn actor_inputs(scene: &Scene, coord_scale: f64) -> Result<ActorInputs> {
    let a = scene.actors.len();
    let h = scene.horizon.history;
    let mut coord = vec![0.0; a * 3 * h];
    let mut heading = vec![0.0; a * 2 * h];
    let mut velocity = vec![0.0; a * 2 * h];
    let mut observed = Vec::with_capacity(a * h);
    let mut positions = Vec::with_capacity(a);
    for (i, actor) in scene.actors.iter().enumerate() {
        let last = actor
            .observed
            .iter()
            .rposition(|&o| o)
            .ok_or_else(|| Error::Encoding(format!("actor `{}` has no observed step", actor.id)))?;
        positions.push(actor.history[last].position);
        for (t, (s, &obs)) in actor.history.iter().zip(&actor.observed).enumerate() {
            observed.push(obs);
            if !obs {
                continue;
            }
            coord[(i * 3) * h + t] = s.position[0] / coord_scale;
            coord[(i * 3 + 1) * h + t] = s.position[1] / coord_scale;
            coord[(i * 3 + 2) * h + t] = 1.0;
            heading[(i * 2) * h + t] = s.heading.cos();
            heading[(i * 2 + 1) * h + t] = s.heading.sin();
            velocity[(i * 2) * h + t] = s.velocity[0] / coord_scale;
            velocity[(i * 2 + 1) * h + t] = s.velocity[1] / coord_scale;
        }
    }
    Ok(ActorInputs {
        count: a,
        history: h,
        coord,
        heading,
        velocity,
        observed,
        positions,
    })
}

/// Three input branches (coordinates, heading, velocity) whose outputs are
/// summed, a trunk at temporal scales 1, 2 and 4, and an FPN that merges the
/// scales back to full resolution.
#[derive(Debug, Clone)]
pub struct ActorEncoder {
    pub branches: [ResBlock1d; 3],
    pub trunk: [ResBlock1d; 3],
    pub lateral: [Conv1d; 3],
    pub merge: ResBlock1d,
}

impl ActorEncoder {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, d: usize) -> Result<Self> {
        let branches = [
            ResBlock1d::new(init, &format!("{name}.coord"), 3, d, 1)?,
            ResBlock1d::new(init, &format!("{name}.heading"), 2, d, 1)?,
            ResBlock1d::new(init, &format!("{name}.velocity"), 2, d, 1)?,
        ];
        let trunk = [
            ResBlock1d::new(init, &format!("{name}.trunk1"), d, d, 1)?,
            ResBlock1d::new(init, &format!("{name}.trunk2"), d, d, 2)?,
            ResBlock1d::new(init, &format!("{name}.trunk4"), d, d, 2)?,
        ];
        let lateral = [
            Conv1d::new(init, &format!("{name}.lateral1"), d, d, 1, 1)?,
            Conv1d::new(init, &format!("{name}.lateral2"), d, d, 1, 1)?,
            Conv1d::new(init, &format!("{name}.lateral4"), d, d, 1, 1)?,
        ];
        let merge = ResBlock1d::new(init, &format!("{name}.merge"), d, d, 1)?;
        Ok(Self {
            branches,
            trunk,
            lateral,
            merge,
        })
    }

    /// Actor embeddings `[A, D]`: the FPN output max-pooled over observed steps.
    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: &ActorInputs) -> Result<Var> {
        let (a, h) = (x.count, x.history);
        if h < 4 {
            return Err(Error::Encoding(format!("history length {h} < 4")));
        }
        if a == 0 {
            return Err(Error::Encoding("scene has no actors".into()));
        }
        let inputs = [
            f.constant(&[a, 3, h], &x.coord)?,
            f.constant(&[a, 2, h], &x.heading)?,
            f.constant(&[a, 2, h], &x.velocity)?,
        ];
        let mut sum = None;
        for (branch, input) in self.branches.iter().zip(inputs) {
            let y = branch.forward(f, input)?;
            sum = Some(match sum {
                Some(s) => f.tape.add(s, y)?,
                None => y,
            });
        }
        let s1 = self.trunk[0].forward(f, sum.expect("three branches"))?;
        let s2 = self.trunk[1].forward(f, s1)?;
        let s4 = self.trunk[2].forward(f, s2)?;

        let mut top = self.lateral[2].forward(f, s4)?;
        for (lat, skip) in [(&self.lateral[1], s2), (&self.lateral[0], s1)] {
            let len = f.tape.shape(skip)[2];
            let up = upsample(f, top, len)?;
            let l = lat.forward(f, skip)?;
            top = f.tape.add(up, l)?;
        }
        let y = self.merge.forward(f, top)?;

        let d = f.tape.shape(y)[1];
        let mut mask = vec![0.0; a * d * h];
        for i in 0..a {
            for c in 0..d {
                for t in 0..h {
                    if !x.observed[i * h + t] {
                        mask[(i * d + c) * h + t] = MASK_FILL;
                    }
                }
            }
        }
        let mask = f.constant(&[a, d, h], &mask)?;
        let y = f.tape.add(y, mask)?;
        f.tape.max(y, 2)
    }
}

// ---- lane graph ------------------------------------------------------------

/// One gated lane-graph convolution layer:
/// `Y = X W0 + sum_c g_c * (A_c X W_c)` with `g_{i,c} = sigmoid(X_i U_c + b_c)`,
/// output `layer_norm(relu(Y)) + X`.
#[derive(Debug, Clone)]
pub struct GatedGraphConv {
    pub w0: ParamId,
    pub w: [ParamId; 4],
    pub u: [ParamId; 4],
    pub b: [ParamId; 4],
}

impl GatedGraphConv {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, d: usize) -> Result<Self> {
        let w0 = init.uniform(&format!("{name}.w0"), &[d, d], d)?;
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for kind in Adjacency::ALL {
            let c = kind.name();
            w.push(init.uniform(&format!("{name}.w_{c}"), &[d, d], d)?);
            u.push(init.uniform(&format!("{name}.u_{c}"), &[d, 1], d)?);
            b.push(init.zeros(&format!("{name}.b_{c}"), &[1])?);
        }
        let arr = |v: Vec<ParamId>| -> [ParamId; 4] { v.try_into().expect("four categories") };
        Ok(Self {
            w0,
            w: arr(w),
            u: arr(u),
            b: arr(b),
        })
    }

    /// Gate values `[N, 1]` for one category.
    pub fn gate<T: Real>(&self, f: &mut Fwd<T>, x: Var, kind: Adjacency) -> Result<Var> {
        let (u, b) = (f.p(self.u[kind.index()]), f.p(self.b[kind.index()]));
        let z = f.tape.matmul(x, u)?;
        let z = f.tape.add_bias(z, b)?;
        Ok(f.tape.sigmoid(z))
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var, graph: &[Vec<(usize, usize)>; 4]) -> Result<Var> {
        self.forward_impl(f, x, graph, true)
    }

    /// The same layer with every gate fixed to 1.
    pub fn forward_ungated<T: Real>(&self, f: &mut Fwd<T>, x: Var, graph: &[Vec<(usize, usize)>; 4]) -> Result<Var> {
        self.forward_impl(f, x, graph, false)
    }

    fn forward_impl<T: Real>(
        &self,
        f: &mut Fwd<T>,
        x: Var,
        graph: &[Vec<(usize, usize)>; 4],
        gated: bool,
    ) -> Result<Var> {
        let n = f.tape.shape(x)[0];
        let w0 = f.p(self.w0);
        let mut y = f.tape.matmul(x, w0)?;
        for kind in Adjacency::ALL {
            let edges = &graph[kind.index()];
            if edges.is_empty() {
                continue;
            }
            let (src, dst): (Vec<usize>, Vec<usize>) = edges.iter().copied().unzip();
            let wc = f.p(self.w[kind.index()]);
            let xw = f.tape.matmul(x, wc)?;
            let msg = f.tape.gather(xw, &dst)?;
            let mut agg = f.tape.scatter_add(msg, &src, n)?;
            if gated {
                let g = self.gate(f, x, kind)?;
                agg = f.tape.scale_rows(agg, g)?;
            }
            y = f.tape.add(y, agg)?;
        }
        let y = f.tape.relu(y);
        let y = f.tape.layer_norm(y, 1, LN_EPS)?;
        f.tape.add(y, x)
    }
}

/// Lane-node geometry and adjacency ready for the lane encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneInputs {
    pub count: usize,
    /// `[N, 5]`: center (scaled), direction, length (scaled).
    pub features: Vec<f64>,
    pub positions: Vec<Point>,
    pub adjacency: [Vec<(usize, usize)>; 4],
}

pub fn lane_inputs(graph: &LaneGraph, coord_scale: f64) -> LaneInputs {
    let mut features = Vec::with_capacity(graph.len() * LANE_FEATURES);
    for n in &graph.nodes {
        features.extend_from_slice(&[
            n.center[0] / coord_scale,
            n.center[1] / coord_scale,
            n.direction[0],
            n.direction[1],
            n.length / coord_scale,
        ]);
    }
    LaneInputs {
        count: graph.len(),
        features,
        positions: graph.nodes.iter().map(|n| n.center).collect(),
        adjacency: graph.adjacency.clone(),
    }
}

/// Node MLP followed by a stack of gated graph convolutions.
#[derive(Debug, Clone)]
pub struct LaneEncoder {
    pub input: Mlp,
    pub layers: Vec<GatedGraphConv>,
}

impl LaneEncoder {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, d: usize, layers: usize) -> Result<Self> {
        let input = Mlp::new(init, &format!("{name}.input"), LANE_FEATURES, d, d)?;
        let layers = (0..layers)
            .map(|l| GatedGraphConv::new(init, &format!("{name}.gcn{l}"), d))
            .collect::<Result<_>>()?;
        Ok(Self { input, layers })
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: &LaneInputs) -> Result<Var> {
        if x.count == 0 {
            return Err(Error::Encoding("lane graph is empty".into()));
        }
        let feats = f.constant(&[x.count, LANE_FEATURES], &x.features)?;
        let mut h = self.input.forward(f, feats)?;
        for layer in &self.layers {
            h = layer.forward(f, h, &x.adjacency)?;
        }
        Ok(h)
    }
}

// ---- boundaries ------------------------------------------------------------

/// Boundary polylines resampled into nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryInputs {
    pub count: usize,
    /// `[B, 8]`: center (scaled), direction, marking one-hot.
    pub features: Vec<f64>,
    pub positions: Vec<Point>,
    /// Index of the source polyline of each node.
    pub polyline: Vec<usize>,
}

pub fn boundary_inputs(scene: &Scene, coord_scale: f64) -> BoundaryInputs {
    let mut features = Vec::new();
    let mut positions = Vec::new();
    let mut polyline = Vec::new();
    for (p, b) in scene.boundaries.iter().enumerate() {
        let Some(nodes) = resample_polyline(&b.points, scene.graph_options.segment_len) else {
            continue;
        };
        for n in nodes {
            features.extend_from_slice(&[
                n.center[0] / coord_scale,
                n.center[1] / coord_scale,
                n.direction[0],
                n.direction[1],
            ]);
            features.extend_from_slice(&b.marking.one_hot());
            positions.push(n.center);
            polyline.push(p);
        }
    }
    BoundaryInputs {
        count: positions.len(),
        features,
        positions,
        polyline,
    }
}

/// Per-node MLP over boundary geometry and marking type.
#[derive(Debug, Clone)]
pub struct BoundaryEncoder {
    pub mlp: Mlp,
}

impl BoundaryEncoder {
    pub fn new<T: Real, R: Rng>(init: &mut Init<T, R>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(init, &format!("{name}.mlp"), BOUNDARY_FEATURES, d, d)?,
        })
    }

    /// Boundary features `[B, D]`; `B` may be zero.
    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: &BoundaryInputs) -> Result<Var> {
        let feats = f.constant(&[x.count, BOUNDARY_FEATURES], &x.features)?;
        self.mlp.forward(f, feats)
    }
}

/// Marking one-hot width, kept in sync with [`Marking::one_hot`].
const _: () = assert!(Marking::ALL.len() == BOUNDARY_FEATURES - 4);
