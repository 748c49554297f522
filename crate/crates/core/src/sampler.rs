//! Rule-based multi-round sequence generation for both domains, and
//! training-window extraction.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::{AssetKind, AssetStore};
use crate::planner::{self, Camera, GROUND_EXTENT};
use crate::scene::{
    apply_operation_with, build_record, render, Axis, Canvas, Domain, ObjectInstance, Observation, OpKind, Operation,
    OperationCommand, OperationLimits, OperationRecord, SceneError, SceneState,
};
use crate::session::EditHistory;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no legal command found after {0} (object, operation) pairs")]
    SamplingExhausted(usize),
    #[error("sequence has {len} frames, window needs {need}")]
    SequenceTooShort { len: usize, need: usize },
    #[error("asset store has no {0}")]
    NoAssets(&'static str),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Sampling bounds and sequence shape. Key names are part of the config
/// file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub seq_len: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub seed: u64,
    /// Per-step center offset bound as a fraction of the shortest canvas side.
    pub center_offset_frac: f64,
    pub depth_offset: f64,
    pub depth_range: [f64; 2],
    pub scale_factor: [f64; 2],
    pub scale_step: [f64; 2],
    /// Symmetric X, Y, Z angle bounds in degrees.
    pub angle_bounds: [f64; 3],
    /// Ground step radius as a fraction of the ground extent.
    pub ground_step_frac: f64,
    pub object_count_real: [usize; 2],
    pub object_count_syn: [usize; 2],
    pub attempts_per_pair: usize,
    pub outer_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            seq_len: 32,
            r_min: 1,
            r_max: 12,
            seed: 0,
            center_offset_frac: 0.6,
            depth_offset: 30.0,
            depth_range: [10.0, 200.0],
            scale_factor: [0.2, 4.0],
            scale_step: [0.2, 4.0],
            angle_bounds: [50.0, 45.0, 60.0],
            ground_step_frac: 0.6,
            object_count_real: [1, 4],
            object_count_syn: [2, 5],
            attempts_per_pair: 64,
            outer_retries: 8,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Config(m.to_string()));
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(1 <= self.r_min && self.r_min <= self.r_max) {
            return bad("need 1 <= r_min <= r_max");
        }
        if self.seq_len < self.r_max {
            return bad("seq_len must be at least r_max");
        }
        if !ordered(self.depth_range) || !ordered(self.scale_factor) || !ordered(self.scale_step) {
            return bad("intervals must be finite and ordered");
        }
        if self.scale_factor[0] <= 0.0 || self.scale_step[0] <= 0.0 || self.depth_range[0] <= 0.0 {
            return bad("scale and depth bounds must be positive");
        }
        if self.angle_bounds.iter().any(|a| !(a.is_finite() && *a >= 0.0))
            || !(self.center_offset_frac >= 0.0)
            || !(self.depth_offset >= 0.0)
            || !(self.ground_step_frac >= 0.0)
        {
            return bad("step bounds must be non-negative");
        }
        for r in [self.object_count_real, self.object_count_syn] {
            if !(1 <= r[0] && r[0] <= r[1]) {
                return bad("object counts need 1 <= min <= max");
            }
        }
        if self.attempts_per_pair == 0 || self.outer_retries == 0 {
            return bad("attempt caps must be positive");
        }
        Ok(())
    }

    /// Reads a TOML file (by `.toml` extension) or JSON otherwise.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SamplerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SamplerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: SamplerConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| SamplerError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| SamplerError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn limits(&self) -> OperationLimits {
        OperationLimits {
            scale_factor: self.scale_factor,
            depth: self.depth_range,
            center_offset_frac: self.center_offset_frac,
            depth_offset: self.depth_offset,
            scale_step: self.scale_step,
            angle_bounds: self.angle_bounds,
            ground_step_radius: self.ground_step_frac * GROUND_EXTENT,
        }
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return lo;
    }
    rng.random_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi)
}

fn draw_value<R: Rng + ?Sized>(
    state: &SceneState,
    inst: &ObjectInstance,
    kind: OpKind,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Operation {
    match (state.domain, kind) {
        (Domain::Real, OpKind::T) => {
            let m = cfg.center_offset_frac * state.canvas.shortest_side();
            Operation::TranslateImage {
                dx: rng.random_range(-m..=m),
                dy: rng.random_range(-m..=m),
                dd: rng.random_range(-cfg.depth_offset..=cfg.depth_offset),
            }
        }
        (Domain::Syn, OpKind::T) => {
            let radius = cfg.ground_step_frac * GROUND_EXTENT * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..2.0 * PI);
            Operation::TranslateGround {
                dx: radius * theta.cos(),
                dz: radius * theta.sin(),
            }
        }
        (_, OpKind::S) => {
            let lo = cfg.scale_step[0].max(cfg.scale_factor[0] / inst.scale);
            let hi = cfg.scale_step[1].min(cfg.scale_factor[1] / inst.scale);
            Operation::Scale(log_uniform(rng, lo, hi))
        }
        (_, k) => {
            let axis = match k {
                OpKind::X => Axis::X,
                OpKind::Y => Axis::Y,
                _ => Axis::Z,
            };
            let b = cfg.angle_bounds[axis.index()];
            Operation::Rotate {
                axis,
                degrees: rng.random_range(-b..=b),
            }
        }
    }
}

/// A command that was sampled and checked, with the state it produces.
#[derive(Clone, Debug)]
pub struct SampledCommand {
    pub command: OperationCommand,
    pub next: SceneState,
}

/// Draws a random object and operation kind, then a value within bounds,
/// keeping the first candidate whose transition succeeds.
pub fn sample_command<R: Rng + ?Sized>(
    state: &SceneState,
    assets: &AssetStore,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampledCommand, SamplerError> {
    if state.objects.is_empty() {
        return Err(SamplerError::SamplingExhausted(0));
    }
    let limits = cfg.limits();
    for _ in 0..cfg.outer_retries {
        let inst = state.objects.choose(rng).expect("non-empty");
        let kind = *state.domain.legal_kinds().choose(rng).expect("every domain has legal kinds");
        for _ in 0..cfg.attempts_per_pair {
            let op = draw_value(state, inst, kind, cfg, rng);
            let command = OperationCommand::new(inst.instance_id.clone(), op);
            let Ok(next) = apply_operation_with(state, &command, assets, &limits) else {
                continue;
            };
            // the edited object must still have a footprint to describe
            if crate::scene::footprint(&next, assets, &command.target_instance_id).is_err() {
                continue;
            }
            return Ok(SampledCommand { command, next });
        }
    }
    Err(SamplerError::SamplingExhausted(cfg.outer_retries))
}

/// Random initial scene for `domain` drawn from `assets`.
pub fn initial_state<R: Rng + ?Sized>(
    domain: Domain,
    assets: &AssetStore,
    canvas: Canvas,
    cfg: &SamplerConfig,
    seed: u64,
    rng: &mut R,
) -> Result<SceneState, SamplerError> {
    let kind = domain.asset_kind();
    let pool = assets.objects(kind);
    if pool.is_empty() {
        return Err(SamplerError::NoAssets(match kind {
            AssetKind::Layer2d => "object layers",
            AssetKind::Box3d => "box assets",
        }));
    }
    match domain {
        Domain::Real => {
            let backgrounds = assets.backgrounds();
            let bg = backgrounds.choose(rng).ok_or(SamplerError::NoAssets("backgrounds"))?;
            let count = rng.random_range(cfg.object_count_real[0]..=cfg.object_count_real[1]);
            let objects = (0..count)
                .map(|i| {
                    let asset = pool.choose(rng).expect("non-empty");
                    let center = [
                        rng.random_range(0.0..canvas.width as f64),
                        rng.random_range(0.0..canvas.height as f64),
                    ];
                    let depth = rng.random_range(cfg.depth_range[0]..=cfg.depth_range[1]);
                    ObjectInstance::layer(format!("inst_{i}"), asset.id.clone(), center, depth, 1.0)
                })
                .collect();
            Ok(SceneState {
                domain,
                background_id: bg.id.clone(),
                canvas,
                objects,
                camera: None,
                rng_seed: seed,
            })
        }
        Domain::Syn => {
            let backgrounds = assets.backgrounds();
            let bg_id = backgrounds
                .choose(rng)
                .map(|b| b.id.clone())
                .unwrap_or_else(|| "ground".to_string());
            let mut last = SceneError::PlacementExhausted(planner::PLACEMENT_ATTEMPTS);
            for _ in 0..cfg.outer_retries {
                let count = rng.random_range(cfg.object_count_syn[0]..=cfg.object_count_syn[1]);
                let chosen: Vec<_> = (0..count).map(|_| *pool.choose(rng).expect("non-empty")).collect();
                match planner::place_objects(&bg_id, &chosen, canvas, Camera::default(), seed, rng) {
                    Ok(s) => return Ok(s),
                    Err(e) => last = e,
                }
            }
            Err(last.into())
        }
    }
}

/// One generated sequence: `states.len() == observations.len() ==
/// records.len() + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub seed: u64,
    pub states: Vec<SceneState>,
    pub observations: Vec<Observation>,
    pub records: Vec<OperationRecord>,
    /// Set when sampling gave up before `seq_len` rounds.
    pub truncated: bool,
}

impl Sequence {
    pub fn domain(&self) -> Domain {
        self.states[0].domain
    }

    pub fn commands(&self) -> Vec<OperationCommand> {
        self.records.iter().map(|r| r.command.clone()).collect()
    }
}

/// Simulates `cfg.seq_len` rounds from `initial`, rendering every state.
pub fn build_sequence<R: Rng + ?Sized>(
    initial: SceneState,
    assets: &AssetStore,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Sequence, SamplerError> {
    let mut seq = Sequence {
        seed: initial.rng_seed,
        observations: vec![render(&initial, assets)?],
        states: vec![initial],
        records: Vec::with_capacity(cfg.seq_len),
        truncated: false,
    };
    for round in 1..=cfg.seq_len {
        let state = seq.states.last().expect("non-empty");
        let sampled = match sample_command(state, assets, cfg, rng) {
            Ok(s) => s,
            Err(SamplerError::SamplingExhausted(_)) => {
                seq.truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let record = build_record(state, &sampled.next, &sampled.command, assets, round, true)?;
        seq.observations.push(render(&sampled.next, assets)?);
        seq.records.push(record);
        seq.states.push(sampled.next);
    }
    Ok(seq)
}

/// Full pipeline for one seed: initial scene, then `build_sequence`.
pub fn generate_sequence(
    domain: Domain,
    assets: &AssetStore,
    canvas: Canvas,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Sequence, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = initial_state(domain, assets, canvas, cfg, seed, &mut rng)?;
    build_sequence(initial, assets, cfg, &mut rng)
}

/// Cuts a random history of `r` pairs plus its target frame out of `seq`,
/// with `r` uniform on `[r_min, r_max]` and the start offset uniform.
pub fn sample_training_window<R: Rng + ?Sized>(
    seq: &Sequence,
    rng: &mut R,
    r_min: usize,
    r_max: usize,
) -> Result<(EditHistory, Observation), SamplerError> {
    if r_min == 0 || r_min > r_max {
        return Err(SamplerError::Config("need 1 <= r_min <= r_max".into()));
    }
    if seq.observations.len() < r_max + 1 {
        return Err(SamplerError::SequenceTooShort {
            len: seq.observations.len(),
            need: r_max + 1,
        });
    }
    let r = rng.random_range(r_min..=r_max);
    let start = rng.random_range(0..=seq.observations.len() - 1 - r);
    let history = EditHistory {
        frames: seq.observations[start..start + r].to_vec(),
        records: seq.records[start..start + r].to_vec(),
    };
    Ok((history, seq.observations[start + r].clone()))
}
