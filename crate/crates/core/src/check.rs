//! Gradient checks over every block of a small network.
//!
//! Each block is checked on its own output, with its inputs frozen at the
//! values a real forward pass gives it, and the stage losses are checked end
//! to end. Central differences are only meaningful where the objective is
//! smooth within the step, so the checked point is re-drawn until every
//! relu, max and norm sits at least [`KINK_MARGIN`] from its kink, and
//! every sampled derivative spans at least [`MIN_RESOLUTION`] quanta of the
//! difference quotient. Both tests read only values and numeric
//! differences, never the gradients under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{grad_check_where, jitter, CoordSample, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, CONF_FILTER_M};
use crate::model::{Banet, ModelConfig, Sample};
use crate::net_decoder::Stage;
use crate::net_fusion::{Framed, FusionGeometry};
use crate::nn::Fwd;
use crate::scene::{generate_synthetic, Point, SceneGenConfig};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Parameters are moved this far off their initial values (zero biases sit
/// on relu kinks).
pub const JITTER: f64 = 0.1;
/// Required distance from every kink, in value units.
pub const KINK_MARGIN: f64 = 1e-3;
pub const MAX_DRAWS: u64 = 200;
/// A central difference moves in steps of `ulp(f) / 2h`, so a derivative
/// worth a few thousand steps already carries ~1e-4 of rounding.
pub const MIN_RESOLUTION: f64 = 2e4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub objective: &'static str,
    pub block: String,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Smallest checked derivative of the objective, in finite-difference
    /// quanta.
    pub resolution: f64,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Groups a parameter name into its block: each fusion stage, the decoder's
/// completion head and target heads, and each encoder.
pub fn block_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match (first, parts.next()) {
        ("fusion", Some(stage)) => format!("fusion.{stage}"),
        ("decoder", Some("completion")) => "decoder.completion".into(),
        ("decoder", Some(_)) => "decoder.heads".into(),
        _ => first.to_string(),
    }
}

/// Block outputs of one sample at the checked point.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub actor: Tensor<f64>,
    pub lane: Tensor<f64>,
    pub boundary: Tensor<f64>,
    pub focal: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub struct CheckSetup {
    pub model: Banet,
    pub params: ParamStore<f64>,
    pub samples: Vec<Sample>,
    pub frozen: Vec<Frozen>,
    /// Jitter draw that gave a smooth point.
    pub draw: u64,
    pub margin: f64,
}

fn check_config() -> (ModelConfig, SceneGenConfig) {
    let model = ModelConfig {
        d: 8,
        gcn_layers: 1,
        history: 6,
        future: 5,
        ..ModelConfig::default()
    };
    let scene = SceneGenConfig {
        num_lanes: 2,
        lane_length: 24.0,
        segment_len: 3.0,
        num_actors: 2,
        history: 6,
        future: 5,
        ..SceneGenConfig::desk()
    };
    (model, scene)
}

fn losses(f: &mut Fwd<f64>, model: &Banet, samples: &[Sample], stage: Stage) -> Result<Var> {
    let mut outs = Vec::new();
    for s in samples {
        outs.push(model.forward(f, s, stage)?);
    }
    let items: Vec<_> = outs.into_iter().zip(samples.iter()).collect();
    Ok(batch_loss(f, &items, stage)?.total)
}

/// Width 8, one graph layer, two lanes, two focal actors.
pub fn check_setup(seed: u64) -> Result<CheckSetup> {
    check_setup_from(seed, 0)
}

/// Like [`check_setup`], trying jitter draws from `first` on.
pub fn check_setup_from(seed: u64, first: u64) -> Result<CheckSetup> {
    let (config, gen) = check_config();
    let (model, base) = Banet::init::<f64>(&config, seed)?;
    let mut scene = generate_synthetic(&gen, seed.wrapping_add(1))?;
    for a in scene.actors.iter_mut().filter(|a| a.last_observed()) {
        a.is_focal = true;
    }
    let plain = Sample::focal_samples(&scene, &config)?;
    let mut best = 0.0f64;
    for draw in first..MAX_DRAWS {
        let mut params = base.clone();
        jitter(&mut params, JITTER, seed.wrapping_mul(MAX_DRAWS).wrapping_add(draw));
        let mut samples = plain.clone();
        let mut margin = f64::INFINITY;
        // Put each future close to one predicted trajectory: every residual
        // stays in the quadratic part of smooth-l1 and the confidence filter
        // keeps the sample.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(draw));
        for s in samples.iter_mut() {
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, &params);
            let out = model.forward(&mut f, s, Stage::S2)?;
            let traj = tape.value(out.trajectories.expect("stage two")).to_f64();
            let t = config.future;
            let mode = &traj[2 * 2 * t..3 * 2 * t];
            let future: Vec<Point> = mode
                .chunks(2)
                .map(|p| [p[0] + rng.random_range(-0.3..0.3), p[1] + rng.random_range(-0.3..0.3)])
                .collect();
            let targets: Vec<Point> = tape
                .value(out.targets)
                .to_f64()
                .chunks(2)
                .map(|p| [p[0], p[1]])
                .collect();
            let end = future[t - 1];
            let mut d: Vec<f64> = targets.iter().map(|g| (g[0] - end[0]).hypot(g[1] - end[1])).collect();
            d.sort_by(f64::total_cmp);
            // the winner and the filter are discrete choices made off the tape
            margin = margin.min(d[1] - d[0]).min((CONF_FILTER_M - d[0]).abs());
            s.future = Some(future);
        }
        for stage in [Stage::S1, Stage::S2] {
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, &params);
            losses(&mut f, &model, &samples, stage)?;
            margin = margin.min(tape.kink_margin());
        }
        best = best.max(margin);
        if margin < KINK_MARGIN {
            continue;
        }
        let mut frozen = Vec::new();
        for s in &samples {
            let mut tape = Tape::new();
            let mut f = Fwd::new(&mut tape, &params);
            let actor = model.actor.forward(&mut f, &s.actors)?;
            let lane = model.lane.forward(&mut f, &s.lanes)?;
            let boundary = model.boundary.forward(&mut f, &s.boundaries)?;
            let fused = model.encode_fuse(&mut f, s)?;
            let focal = f.tape.gather(fused, &[s.focal])?;
            frozen.push(Frozen {
                actor: tape.value(actor).clone(),
                lane: tape.value(lane).clone(),
                boundary: tape.value(boundary).clone(),
                focal: tape.value(focal).clone(),
            });
        }
        return Ok(CheckSetup {
            model,
            params,
            samples,
            frozen,
            draw,
            margin,
        });
    }
    Err(Error::Check(format!(
        "no parameter draw within {MAX_DRAWS} tries keeps every kink {KINK_MARGIN} away (best {best:.2e})"
    )))
}

fn readout(f: &mut Fwd<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = f.tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = f.tape.constant(Tensor::from_f64(&shape, &r)?);
    let prod = f.tape.mul(out, r)?;
    Ok(f.tape.sum_all(prod))
}

fn sum_vars(f: &mut Fwd<f64>, vars: Vec<Var>) -> Result<Var> {
    let mut it = vars.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::contract("empty objective"))?;
    for v in it {
        acc = f.tape.add(acc, v)?;
    }
    Ok(acc)
}

/// The checked objectives, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    ActorEncoder,
    LaneEncoder,
    BoundaryEncoder,
    Fusion,
    Decoder(Stage),
    Loss(Stage),
}

impl Objective {
    pub const ALL: [Objective; 8] = [
        Self::ActorEncoder,
        Self::LaneEncoder,
        Self::BoundaryEncoder,
        Self::Fusion,
        Self::Decoder(Stage::S1),
        Self::Decoder(Stage::S2),
        Self::Loss(Stage::S1),
        Self::Loss(Stage::S2),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ActorEncoder => "actor_encoder",
            Self::LaneEncoder => "lane_encoder",
            Self::BoundaryEncoder => "boundary_encoder",
            Self::Fusion => "fusion",
            Self::Decoder(Stage::S1) => "decoder_s1",
            Self::Decoder(Stage::S2) => "decoder_s2",
            Self::Loss(Stage::S1) => "loss_s1",
            Self::Loss(Stage::S2) => "loss_s2",
        }
    }

    /// Whether the objective depends on the parameter.
    pub fn covers(self, name: &str) -> bool {
        let block = block_of(name);
        match self {
            Self::ActorEncoder => block == "actor",
            Self::LaneEncoder => block == "lane",
            Self::BoundaryEncoder => block == "boundary",
            Self::Fusion => block.starts_with("fusion."),
            Self::Decoder(Stage::S1) => block == "decoder.heads",
            Self::Decoder(Stage::S2) => block.starts_with("decoder."),
            Self::Loss(Stage::S1) => block != "decoder.completion",
            Self::Loss(Stage::S2) => true,
        }
    }

    pub fn eval(self, f: &mut Fwd<f64>, setup: &CheckSetup) -> Result<Var> {
        let model = &setup.model;
        let mut terms = Vec::new();
        for (i, (s, z)) in setup.samples.iter().zip(&setup.frozen).enumerate() {
            let seed = 100 * (i as u64 + 1);
            match self {
                Self::ActorEncoder => {
                    let out = model.actor.forward(f, &s.actors)?;
                    terms.push(readout(f, out, seed)?);
                }
                Self::LaneEncoder => {
                    let out = model.lane.forward(f, &s.lanes)?;
                    terms.push(readout(f, out, seed)?);
                }
                Self::BoundaryEncoder => {
                    let out = model.boundary.forward(f, &s.boundaries)?;
                    terms.push(readout(f, out, seed)?);
                }
                Self::Fusion => {
                    let actor = f.tape.constant(z.actor.clone());
                    let lane = f.tape.constant(z.lane.clone());
                    let boundary = f.tape.constant(z.boundary.clone());
                    let geo = FusionGeometry {
                        actors: Framed::new(&s.frame, &s.actors.positions),
                        lanes: Framed::new(&s.frame, &s.lanes.positions),
                        boundaries: Framed::new(&s.frame, &s.boundaries.positions),
                        matching: &s.matching,
                    };
                    let out = model.fusion.forward(f, actor, lane, boundary, &geo)?;
                    terms.push(readout(f, out, seed)?);
                }
                Self::Decoder(stage) => {
                    let focal = f.tape.constant(z.focal.clone());
                    let t = model.decoder.predict_targets(f, focal)?;
                    terms.push(readout(f, t.points, seed)?);
                    terms.push(readout(f, t.logits, seed + 1)?);
                    if stage == Stage::S2 {
                        let s2 = model.decoder.complete_trajectories(f, focal, t.points)?;
                        terms.push(readout(f, s2, seed + 2)?);
                    }
                }
                Self::Loss(_) => {}
            }
        }
        if let Self::Loss(stage) = self {
            return losses(f, model, &setup.samples, stage);
        }
        sum_vars(f, terms)
    }
}

/// Runs every objective at up to `per_param` sampled coordinates of each
/// parameter tensor it depends on. Returns one row per (objective, block).
pub fn check_blocks(setup: &CheckSetup, per_param: usize, seed: u64) -> Result<Vec<BlockCheck>> {
    let mut rows: Vec<BlockCheck> = Vec::new();
    for (i, obj) in Objective::ALL.into_iter().enumerate() {
        let report = grad_check_where(
            |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
                let mut f = Fwd::new(tape, store);
                obj.eval(&mut f, setup)
            },
            &setup.params,
            STEP,
            CoordSample {
                per_param: Some(per_param),
                seed: seed.wrapping_add(i as u64),
            },
            |name| obj.covers(name),
        )?;
        for (name, err) in &report.per_param {
            let block = block_of(name);
            let len = setup.params.get(setup.params.id(name).expect("checked name")).len();
            let coords = len.min(per_param);
            match rows.iter_mut().find(|r| r.objective == obj.name() && r.block == block) {
                Some(r) => {
                    r.max_rel_error = r.max_rel_error.max(*err);
                    r.coords += coords;
                }
                None => rows.push(BlockCheck {
                    objective: obj.name(),
                    block,
                    max_rel_error: *err,
                    coords,
                    resolution: report.min_resolution,
                }),
            }
        }
    }
    Ok(rows)
}

/// [`check_setup`] followed by [`check_blocks`], moving on to the next
/// smooth draw while some sampled derivative is too small to resolve.
pub fn check_all_blocks(seed: u64, per_param: usize) -> Result<Vec<BlockCheck>> {
    let mut first = 0;
    let mut best = 0.0f64;
    while first < MAX_DRAWS {
        let setup = check_setup_from(seed, first)?;
        let rows = check_blocks(&setup, per_param, seed)?;
        let resolution = rows.iter().map(|r| r.resolution).fold(f64::INFINITY, f64::min);
        if resolution >= MIN_RESOLUTION {
            return Ok(rows);
        }
        best = best.max(resolution);
        first = setup.draw + 1;
    }
    Err(Error::Check(format!(
        "no parameter draw within {MAX_DRAWS} tries resolves every derivative to {MIN_RESOLUTION:.0e} steps (best {best:.2e})"
    )))
}
