//! Renderer-agnostic scene scripts: one full transform snapshot per round.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Camera;
use crate::assets::AssetStore;
use crate::scene::{apply_operation, Canvas, Domain, ObjectInstance, Operation, OperationCommand, Placement, SceneError, SceneState};

pub const SCRIPT_SCHEMA_VERSION: u32 = 1;
const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub pos: [f64; 3],
    pub rot_deg: [f64; 3],
    pub scale: f64,
}

impl Transform {
    fn of(inst: &ObjectInstance) -> Result<Self, SceneError> {
        match inst.placement {
            Placement::Box { position, rotation_deg } => Ok(Transform {
                pos: position,
                rot_deg: rotation_deg,
                scale: inst.scale,
            }),
            Placement::Layer { .. } => Err(SceneError::InconsistentSequence(format!(
                "instance `{}` is not a planning-domain box",
                inst.instance_id
            ))),
        }
    }

    fn close_to(&self, other: &Transform) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= REPLAY_TOLERANCE;
        (0..3).all(|k| close(self.pos[k], other.pos[k]) && close(self.rot_deg[k], other.rot_deg[k]))
            && close(self.scale, other.scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptInstance {
    pub instance_id: String,
    pub asset_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptRound {
    pub idx: usize,
    /// Edited instance; `None` for the initial round.
    pub instance: Option<String>,
    pub op: Option<Operation>,
    /// Every instance's transform after this round.
    pub transform: BTreeMap<String, Transform>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub schema_version: u32,
    pub seed: u64,
    pub canvas: Canvas,
    pub camera: Camera,
    pub background: String,
    pub instances: Vec<ScriptInstance>,
    pub rounds: Vec<ScriptRound>,
}

impl SceneScript {
    pub fn to_json(&self) -> String {
        // through Value so keys come out sorted
        let v = serde_json::to_value(self).expect("script is plain data");
        serde_json::to_string_pretty(&v).expect("script is plain data")
    }
}

fn snapshot(state: &SceneState) -> Result<BTreeMap<String, Transform>, SceneError> {
    state
        .objects
        .iter()
        .map(|o| Ok((o.instance_id.clone(), Transform::of(o)?)))
        .collect()
}

fn same_snapshot(a: &BTreeMap<String, Transform>, b: &BTreeMap<String, Transform>) -> bool {
    a.len() == b.len() && a.iter().all(|(k, t)| b.get(k).is_some_and(|u| t.close_to(u)))
}

/// Builds the script for `states[0]` followed by `commands`, where
/// `states[i + 1]` is the result of applying `commands[i]` to `states[i]`.
pub fn emit_scene_script(
    states: &[SceneState],
    commands: &[OperationCommand],
    assets: &AssetStore,
) -> Result<SceneScript, SceneError> {
    let first = states
        .first()
        .ok_or_else(|| SceneError::InconsistentSequence("no initial state".into()))?;
    if states.len() != commands.len() + 1 {
        return Err(SceneError::InconsistentSequence(format!(
            "{} states for {} commands",
            states.len(),
            commands.len()
        )));
    }
    if first.domain != Domain::Syn {
        return Err(SceneError::InconsistentSequence("scene scripts describe planning-domain sequences".into()));
    }
    let camera = first
        .camera
        .ok_or_else(|| SceneError::InconsistentSequence("initial state has no camera".into()))?;

    let mut rounds = vec![ScriptRound {
        idx: 0,
        instance: None,
        op: None,
        transform: snapshot(first)?,
    }];
    for (i, cmd) in commands.iter().enumerate() {
        let expected = apply_operation(&states[i], cmd, assets)
            .map_err(|e| SceneError::InconsistentSequence(format!("round {}: {e}", i + 1)))?;
        let recorded = snapshot(&states[i + 1])?;
        if !same_snapshot(&snapshot(&expected)?, &recorded) {
            return Err(SceneError::InconsistentSequence(format!(
                "round {} does not follow from its command",
                i + 1
            )));
        }
        rounds.push(ScriptRound {
            idx: i + 1,
            instance: Some(cmd.target_instance_id.clone()),
            op: Some(cmd.op),
            transform: recorded,
        });
    }
    Ok(SceneScript {
        schema_version: SCRIPT_SCHEMA_VERSION,
        seed: first.rng_seed,
        canvas: first.canvas,
        camera,
        background: first.background_id.clone(),
        instances: first
            .objects
            .iter()
            .map(|o| ScriptInstance {
                instance_id: o.instance_id.clone(),
                asset_id: o.asset_id.clone(),
            })
            .collect(),
        rounds,
    })
}

/// Re-simulates a script from its initial round and checks every recorded
/// snapshot; returns the reconstructed states.
pub fn replay_script(script: &SceneScript, assets: &AssetStore) -> Result<Vec<SceneState>, SceneError> {
    let first = script
        .rounds
        .first()
        .ok_or_else(|| SceneError::InconsistentSequence("script has no rounds".into()))?;
    let mut objects = Vec::with_capacity(script.instances.len());
    for inst in &script.instances {
        let t = first.transform.get(&inst.instance_id).ok_or_else(|| {
            SceneError::InconsistentSequence(format!("round 0 lacks instance `{}`", inst.instance_id))
        })?;
        objects.push(ObjectInstance::cuboid(
            inst.instance_id.clone(),
            inst.asset_id.clone(),
            t.pos,
            t.rot_deg,
            t.scale,
        ));
    }
    let mut state = SceneState {
        domain: Domain::Syn,
        background_id: script.background.clone(),
        canvas: script.canvas,
        objects,
        camera: Some(script.camera),
        rng_seed: script.seed,
    };
    if snapshot(&state)?.len() != first.transform.len() {
        return Err(SceneError::InconsistentSequence("round 0 names unknown instances".into()));
    }
    let mut states = vec![state.clone()];
    for (k, round) in script.rounds.iter().enumerate().skip(1) {
        if round.idx != k {
            return Err(SceneError::InconsistentSequence(format!("round {k} carries index {}", round.idx)));
        }
        let (Some(id), Some(op)) = (&round.instance, round.op) else {
            return Err(SceneError::InconsistentSequence(format!("round {k} has no command")));
        };
        state = apply_operation(&state, &OperationCommand::new(id.clone(), op), assets)
            .map_err(|e| SceneError::InconsistentSequence(format!("round {k}: {e}")))?;
        if !same_snapshot(&snapshot(&state)?, &round.transform) {
            return Err(SceneError::InconsistentSequence(format!("round {k} snapshot does not replay")));
        }
        states.push(state.clone());
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::ObjectAsset;
    use crate::scene::Axis;

    fn fixture() -> (AssetStore, SceneState) {
        let mut s = AssetStore::new();
        s.insert(ObjectAsset::cuboid("unit", [1.0; 3], vec![]).unwrap()).unwrap();
        let state = SceneState {
            domain: Domain::Syn,
            background_id: "bg".into(),
            canvas: Canvas::square(128),
            objects: vec![
                ObjectInstance::cuboid("a", "unit", [0.0, 0.5, 0.0], [0.0; 3], 1.0),
                ObjectInstance::cuboid("b", "unit", [3.0, 0.5, 0.0], [0.0; 3], 1.0),
            ],
            camera: Some(Camera::default()),
            rng_seed: 9,
        };
        (s, state)
    }

    #[test]
    fn empty_command_list_gives_initial_round_only() {
        let (assets, state) = fixture();
        let script = emit_scene_script(&[state], &[], &assets).unwrap();
        assert_eq!(script.rounds.len(), 1);
        assert_eq!(script.rounds[0].transform.len(), 2);
        assert!(script.rounds[0].op.is_none());
    }

    #[test]
    fn round_trip_replay() {
        let (assets, state) = fixture();
        let cmds = vec![
            OperationCommand::new("a", Operation::Rotate { axis: Axis::Y, degrees: 30.0 }),
            OperationCommand::new("b", Operation::Scale(1.5)),
            OperationCommand::new("a", Operation::TranslateGround { dx: -1.0, dz: 1.0 }),
        ];
        let mut states = vec![state];
        for c in &cmds {
            let next = apply_operation(states.last().unwrap(), c, &assets).unwrap();
            states.push(next);
        }
        let script = emit_scene_script(&states, &cmds, &assets).unwrap();
        let json = script.to_json();
        let back: SceneScript = serde_json::from_str(&json).unwrap();
        assert_eq!(back, script);
        assert_eq!(replay_script(&back, &assets).unwrap(), states);
        assert!(json.contains("\"rot_deg\""));
        assert!(json.contains("\"kind\": \"Y\""));
    }

    #[test]
    fn tampered_state_is_rejected() {
        let (assets, state) = fixture();
        let cmd = OperationCommand::new("a", Operation::Scale(2.0));
        let mut wrong = state.clone();
        wrong.objects[0].scale = 3.0;
        let err = emit_scene_script(&[state, wrong], &[cmd], &assets).unwrap_err();
        assert_eq!(err.code(), "InconsistentSequence");
    }
}
