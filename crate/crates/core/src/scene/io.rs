//! Scene JSON files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ActorKind, ActorState, ActorTrack, BoundaryPolyline, Frame, Horizon, Lane, LaneGraphOptions, Marking, Point, Scene,
    Side,
};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame: Option<Frame>,
    horizon: Horizon,
    actors: Vec<ActorRecord>,
    lanes: Vec<LaneRecord>,
    boundaries: Vec<BoundaryRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActorRecord {
    id: String,
    kind: ActorKind,
    /// `[x, y, heading, vx, vy]` per step.
    history: Vec<[f64; 5]>,
    observed: Vec<bool>,
    future: Option<Vec<Point>>,
    focal: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneRecord {
    id: String,
    centerline: Vec<Point>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundaryRecord {
    points: Vec<Point>,
    marking: Marking,
    side: Side,
    lane_id: String,
}

/// Parses a scene from JSON bytes and checks all scene invariants.
pub fn load_scene(bytes: &[u8]) -> Result<Scene> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let file: SceneFile = serde_path_to_error::deserialize(de).map_err(Error::from_json)?;
    let actors = file
        .actors
        .into_iter()
        .map(|a| ActorTrack {
            id: a.id,
            kind: a.kind,
            history: a
                .history
                .iter()
                .map(|s| ActorState {
                    position: [s[0], s[1]],
                    heading: s[2],
                    velocity: [s[3], s[4]],
                })
                .collect(),
            observed: a.observed,
            future_gt: a.future,
            is_focal: a.focal,
        })
        .collect();
    let lanes = file
        .lanes
        .into_iter()
        .map(|l| Lane {
            id: l.id,
            centerline: l.centerline,
        })
        .collect();
    let boundaries = file
        .boundaries
        .into_iter()
        .map(|b| BoundaryPolyline {
            points: b.points,
            marking: b.marking,
            side: b.side,
            lane_id: b.lane_id,
            matched_lane_nodes: Vec::new(),
        })
        .collect();
    Scene::new(
        file.scene_id.unwrap_or_default(),
        file.horizon,
        actors,
        lanes,
        boundaries,
        file.frame.unwrap_or(Frame::World),
        LaneGraphOptions::default(),
    )
}

/// Serializes a scene to JSON with shortest round-trip float formatting.
pub fn save_scene(scene: &Scene) -> Vec<u8> {
    let file = SceneFile {
        scene_id: (!scene.id.is_empty()).then(|| scene.id.clone()),
        frame: (scene.frame != Frame::World).then(|| scene.frame.clone()),
        horizon: scene.horizon,
        actors: scene
            .actors
            .iter()
            .map(|a| ActorRecord {
                id: a.id.clone(),
                kind: a.kind,
                history: a
                    .history
                    .iter()
                    .map(|s| [s.position[0], s.position[1], s.heading, s.velocity[0], s.velocity[1]])
                    .collect(),
                observed: a.observed.clone(),
                future: a.future_gt.clone(),
                focal: a.is_focal,
            })
            .collect(),
        lanes: scene
            .lanes
            .iter()
            .map(|l| LaneRecord {
                id: l.id.clone(),
                centerline: l.centerline.clone(),
            })
            .collect(),
        boundaries: scene
            .boundaries
            .iter()
            .map(|b| BoundaryRecord {
                points: b.points.clone(),
                marking: b.marking,
                side: b.side,
                lane_id: b.lane_id.clone(),
            })
            .collect(),
    };
    serde_json::to_vec(&file).expect("scene serializes")
}

pub fn load_scene_file(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_scene(&bytes)
}

pub fn save_scene_file(scene: &Scene, path: &Path) -> Result<()> {
    fs::write(path, save_scene(scene)).map_err(|e| Error::io(path, e))
}
