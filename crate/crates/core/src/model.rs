//! The assembled network: configuration, parameter layout, per-actor inputs
//! and the encode, fuse, decode forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::checkpoint::manifest_of;
use crate::diffcore::{ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::net_decoder::{Decoder, Forecast, Stage, MODES};
use crate::net_encoder::{
    actor_inputs, boundary_inputs, lane_inputs, ActorEncoder, ActorInputs, BoundaryEncoder, BoundaryInputs,
    LaneEncoder, LaneInputs,
};
use crate::net_fusion::{boundary_lane_matching, Framed, FusionGeometry, FusionNet, Thresholds};
use crate::nn::{Fwd, Init};
use crate::scene::{agent_transform, normalize, Frame, Point, RigidTransform, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width.
    pub d: usize,
    /// Gated lane-graph convolution layers.
    pub gcn_layers: usize,
    /// Modes per actor; fixed at 6.
    pub modes: usize,
    pub history: usize,
    pub future: usize,
    pub thresholds: Thresholds,
    /// Meters per network coordinate unit.
    pub coord_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            gcn_layers: 4,
            modes: MODES,
            history: 50,
            future: 60,
            thresholds: Thresholds::default(),
            coord_scale: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d: 32,
            gcn_layers: 2,
            history: 10,
            future: 15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes != MODES {
            return Err(Error::Config(format!("modes must be {MODES}, got {}", self.modes)));
        }
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.history < 4 {
            return Err(Error::Config(format!("history must be >= 4, got {}", self.history)));
        }
        if self.future < 1 {
            return Err(Error::Config("future must be >= 1".into()));
        }
        if !(self.coord_scale > 0.0) {
            return Err(Error::Config(format!(
                "coord_scale must be > 0, got {}",
                self.coord_scale
            )));
        }
        let t = self.thresholds;
        if !(t.lane_actor > 0.0 && t.boundary_actor > 0.0 && t.actor_actor > 0.0) {
            return Err(Error::Config(format!("distance thresholds must be > 0, got {t:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Banet {
    pub config: ModelConfig,
    pub actor: ActorEncoder,
    pub lane: LaneEncoder,
    pub boundary: BoundaryEncoder,
    pub fusion: FusionNet,
    pub decoder: Decoder,
}

/// Forward-pass outputs for the focal actor of one sample.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// `[1, K, 2]`, meters, agent frame.
    pub targets: Var,
    /// `[1, K]`.
    pub logits: Var,
    /// `[1, K, T, 2]`; stage two only.
    pub trajectories: Option<Var>,
}

impl Banet {
    /// Builds the network and freshly initialized parameters.
    pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Banet, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let (d, s) = (config.d, config.coord_scale);
        let model = Banet {
            config: config.clone(),
            actor: ActorEncoder::new(&mut init, "actor", d)?,
            lane: LaneEncoder::new(&mut init, "lane", d, config.gcn_layers)?,
            boundary: BoundaryEncoder::new(&mut init, "boundary", d)?,
            fusion: FusionNet::new(&mut init, "fusion", d, config.thresholds, s)?,
            decoder: Decoder::new(&mut init, "decoder", d, config.future, s)?,
        };
        Ok((model, store))
    }

    /// The network structure alone, for use with loaded parameters.
    pub fn layout(config: &ModelConfig) -> Result<Banet> {
        Ok(Self::init::<f32>(config, 0)?.0)
    }

    /// Checks that `store` has exactly the parameters this network expects.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let (_, expected) = Self::init::<T>(&self.config, 0)?;
        let (a, b) = (manifest_of(&expected), manifest_of(store));
        if a.params.len() != b.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                b.params.len(),
                a.params.len()
            )));
        }
        for (x, y) in a.params.iter().zip(&b.params) {
            if x.name != y.name || x.shape != y.shape {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{}` {:?} does not match `{}` {:?}",
                    y.name, y.shape, x.name, x.shape
                )));
            }
        }
        Ok(())
    }

    /// Whether a parameter belongs to the stage-two completion head.
    pub fn is_stage2_param(name: &str) -> bool {
        name.starts_with(&Decoder::completion_prefix("decoder"))
    }

    /// Fused actor features `[A, D]` of a sample.
    pub fn encode_fuse<T: Real>(&self, f: &mut Fwd<T>, s: &Sample) -> Result<Var> {
        let actor = self.actor.forward(f, &s.actors)?;
        let lane = self.lane.forward(f, &s.lanes)?;
        let boundary = self.boundary.forward(f, &s.boundaries)?;
        let geo = FusionGeometry {
            actors: Framed::new(&s.frame, &s.actors.positions),
            lanes: Framed::new(&s.frame, &s.lanes.positions),
            boundaries: Framed::new(&s.frame, &s.boundaries.positions),
            matching: &s.matching,
        };
        self.fusion.forward(f, actor, lane, boundary, &geo)
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, s: &Sample, stage: Stage) -> Result<Outputs> {
        let fused = self.encode_fuse(f, s)?;
        let focal = f.tape.gather(fused, &[s.focal])?;
        let t = self.decoder.predict_targets(f, focal)?;
        let trajectories = match stage {
            Stage::S1 => None,
            Stage::S2 => Some(self.decoder.complete_trajectories(f, focal, t.points)?),
        };
        Ok(Outputs {
            targets: t.points,
            logits: t.logits,
            trajectories,
        })
    }

    /// Runs one sample and returns its forecast in world coordinates.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, s: &Sample, stage: Stage) -> Result<Forecast> {
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, params);
        let out = self.forward(&mut f, s, stage)?;
        let conf = tape.softmax(out.logits, 1)?;
        let conf = tape.value(conf).to_f64();
        let total: f64 = conf.iter().sum();
        let targets = tape.value(out.targets).to_f64();
        let targets: Vec<Point> = targets.chunks(2).map(|p| s.transform.invert([p[0], p[1]])).collect();
        let trajectories = match out.trajectories {
            Some(v) => {
                let t = self.config.future;
                tape.value(v)
                    .to_f64()
                    .chunks(2 * t)
                    .map(|mode| mode.chunks(2).map(|p| s.transform.invert([p[0], p[1]])).collect())
                    .collect()
            }
            None => targets.iter().map(|g| vec![*g]).collect(),
        };
        Ok(Forecast {
            scene_id: s.scene_id.clone(),
            actor_id: s.actor_id.clone(),
            trajectories,
            confidences: conf.iter().map(|c| c / total).collect(),
            targets,
        })
    }
}

/// One focal actor's view of a scene, in its own frame, ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene_id: String,
    pub actor_id: String,
    pub frame: Frame,
    /// World to agent frame.
    pub transform: RigidTransform,
    pub actors: ActorInputs,
    pub lanes: LaneInputs,
    pub boundaries: BoundaryInputs,
    pub matching: Vec<Vec<usize>>,
    /// Row of the focal actor.
    pub focal: usize,
    /// Ground-truth future in the agent frame, when known.
    pub future: Option<Vec<Point>>,
    pub last_observed: bool,
}

impl Sample {
    pub fn build(scene: &Scene, actor_id: &str, config: &ModelConfig) -> Result<Sample> {
        if scene.horizon.history != config.history || scene.horizon.future != config.future {
            return Err(Error::Config(format!(
                "scene `{}` has horizons H={} T={}, model expects H={} T={}",
                scene.id, scene.horizon.history, scene.horizon.future, config.history, config.future
            )));
        }
        let transform = agent_transform(scene, actor_id)?;
        let local = normalize(scene, actor_id)?;
        let focal = local
            .actors
            .iter()
            .position(|a| a.id == actor_id)
            .expect("normalize checked the actor");
        let actors = actor_inputs(&local, config.coord_scale)?;
        let lanes = lane_inputs(&local.lane_graph, config.coord_scale);
        let boundaries = boundary_inputs(&local, config.coord_scale);
        let matching = boundary_lane_matching(
            &lanes.positions,
            &local.boundaries,
            &boundaries.polyline,
            &boundaries.positions,
        );
        let track = &local.actors[focal];
        Ok(Sample {
            scene_id: scene.id.clone(),
            actor_id: actor_id.to_string(),
            frame: local.frame.clone(),
            transform,
            actors,
            lanes,
            boundaries,
            matching,
            focal,
            future: track.future_gt.clone(),
            last_observed: track.last_observed(),
        })
    }

    /// One sample per focal actor, in scene order.
    pub fn focal_samples(scene: &Scene, config: &ModelConfig) -> Result<Vec<Sample>> {
        scene
            .focal_actors()
            .map(|a| Sample::build(scene, &a.id, config))
            .collect()
    }
}
