//! Two-stage decoder: K target points with confidences, then full
//! trajectories conditioned on the encoded targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::model::{Banet, Sample};
use crate::nn::{Fwd, Init, Linear, Mlp};
use crate::scene::{Point, Scene};

/// Number of predicted modes.
pub const MODES: usize = 6;

/// Training stage: targets and confidences only, or the whole decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    S1,
    S2,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub heads: Vec<Mlp>,
    pub target_encoder: Mlp,
    pub confidence: Mlp,
    pub completion: Mlp,
    pub future: usize,
    pub coord_scale: f64,
}

/// Stage-one outputs.
#[derive(Debug, Clone, Copy)]
pub struct Targets {
    /// `[A, K, 2]`, meters.
    pub points: Var,
    /// `[A, K]`.
    pub logits: Var,
}

impl Decoder {
    /// Parameter-name prefix of the stage-two completion head.
    pub fn completion_prefix(name: &str) -> String {
        format!("{name}.completion.")
    }

    pub fn new<T: Real, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        d: usize,
        future: usize,
        coord_scale: f64,
    ) -> Result<Self> {
        if future == 0 {
            return Err(Error::Config("future horizon must be >= 1".into()));
        }
        let heads = (0..MODES)
            .map(|k| Mlp::new(init, &format!("{name}.target{k}"), d, d, 2))
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            target_encoder: Mlp::new(init, &format!("{name}.target_encoder"), 2, d, d)?,
            // one scoring MLP is shared by all modes, so an output bias would
            // shift every logit equally and never reach the softmax
            confidence: Mlp {
                hidden: Linear::new(init, &format!("{name}.confidence.0"), 2 * d, d, true)?,
                out: Linear::new(init, &format!("{name}.confidence.1"), d, 1, false)?,
            },
            completion: Mlp::new(init, &format!("{name}.completion"), 2 * d, d, 2 * (future - 1))?,
            future,
            coord_scale,
        })
    }

    /// Actor features repeated per mode, concatenated with the encoded targets: `[A*K, 2D]`.
    fn condition<T: Real>(&self, f: &mut Fwd<T>, actor: Var, points: Var) -> Result<Var> {
        let a = f.tape.shape(actor)[0];
        let flat = f.tape.reshape(points, &[a * MODES, 2])?;
        let flat = f.tape.scale(flat, 1.0 / self.coord_scale);
        let enc = self.target_encoder.forward(f, flat)?;
        let rep: Vec<usize> = (0..a).flat_map(|i| std::iter::repeat_n(i, MODES)).collect();
        let rep = f.tape.gather(actor, &rep)?;
        f.tape.concat(&[rep, enc], 1)
    }

    pub fn predict_targets<T: Real>(&self, f: &mut Fwd<T>, actor: Var) -> Result<Targets> {
        let a = f.tape.shape(actor)[0];
        let mut outs = Vec::with_capacity(MODES);
        for head in &self.heads {
            outs.push(head.forward(f, actor)?);
        }
        let points = f.tape.concat(&outs, 1)?;
        let points = f.tape.scale(points, self.coord_scale);
        let points = f.tape.reshape(points, &[a, MODES, 2])?;
        let cond = self.condition(f, actor, points)?;
        let logits = self.confidence.forward(f, cond)?;
        let logits = f.tape.reshape(logits, &[a, MODES])?;
        Ok(Targets { points, logits })
    }

    /// Trajectories `[A, K, T, 2]` whose last step is the target itself.
    pub fn complete_trajectories<T: Real>(&self, f: &mut Fwd<T>, actor: Var, points: Var) -> Result<Var> {
        let a = f.tape.shape(actor)[0];
        let t = self.future;
        let last = f.tape.reshape(points, &[a * MODES, 1, 2])?;
        let traj = if t == 1 {
            last
        } else {
            let cond = self.condition(f, actor, points)?;
            let body = self.completion.forward(f, cond)?;
            let body = f.tape.scale(body, self.coord_scale);
            let body = f.tape.reshape(body, &[a * MODES, t - 1, 2])?;
            f.tape.concat(&[body, last], 1)?
        };
        f.tape.reshape(traj, &[a, MODES, t, 2])
    }
}

/// Forecast of one actor in world coordinates; also the prediction-file record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forecast {
    pub scene_id: String,
    pub actor_id: String,
    /// `[K][T]` points; `T == 1` (the target alone) for stage-one forecasts.
    pub trajectories: Vec<Vec<Point>>,
    pub confidences: Vec<f64>,
    pub targets: Vec<Point>,
}

impl Forecast {
    pub fn validate(&self) -> Result<()> {
        let k = self.confidences.len();
        let key = format!("{}/{}", self.scene_id, self.actor_id);
        if k == 0 || self.trajectories.len() != k || self.targets.len() != k {
            return Err(Error::contract(format!("{key}: inconsistent mode counts")));
        }
        let t = self.trajectories[0].len();
        if t == 0 || self.trajectories.iter().any(|s| s.len() != t) {
            return Err(Error::contract(format!("{key}: ragged trajectories")));
        }
        let sum: f64 = self.confidences.iter().sum();
        if self.confidences.iter().any(|c| !(*c >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("{key}: confidences are not a distribution")));
        }
        let finite = self
            .trajectories
            .iter()
            .flatten()
            .chain(&self.targets)
            .all(|p| p[0].is_finite() && p[1].is_finite());
        if !finite {
            return Err(Error::contract(format!("{key}: non-finite coordinates")));
        }
        Ok(())
    }
}

/// Forecasts every focal actor of `scene`, each in its own frame, returned in
/// world coordinates. Stage-one forecasts carry only the targets.
pub fn forecast<T: Real>(model: &Banet, params: &ParamStore<T>, scene: &Scene, stage: Stage) -> Result<Vec<Forecast>> {
    Sample::focal_samples(scene, &model.config)?
        .iter()
        .map(|s| model.predict(params, s, stage))
        .collect()
}

/// Prediction file: forecasts plus the hash of the configuration that made them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub predictions: Vec<Forecast>,
}

impl PredictionFile {
    /// Parses a wrapped file, a bare list of records or a single record, and
    /// validates every forecast.
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            field: ".".into(),
            message: e.to_string(),
        })?;
        let file = if value.get("predictions").is_some() {
            let pf: PredictionFile = serde_path_to_error::deserialize(value).map_err(Error::from_json)?;
            pf
        } else if value.is_array() {
            let list: Vec<Forecast> = serde_path_to_error::deserialize(value).map_err(Error::from_json)?;
            PredictionFile {
                config_hash: None,
                predictions: list,
            }
        } else {
            let one: Forecast = serde_path_to_error::deserialize(value).map_err(Error::from_json)?;
            PredictionFile {
                config_hash: None,
                predictions: vec![one],
            }
        };
        for f in &file.predictions {
            f.validate()?;
        }
        Ok(file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictions serialize")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
