//! Planning-domain simulation: grounded boxes on a ground plane, collision
//! and frustum constraints, scene scripts for an external renderer, and a
//! z-buffered proxy render.
//!
//! World frame is right-handed with `y` up. An instance's `position` is the
//! center of its (rotated, scaled) box; its orientation is the intrinsic
//! X->Y->Z composition of `rotation_deg`.

pub mod proxy;
pub mod script;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assets::{AssetKind, AssetStore, ObjectAsset};
use crate::scene::{
    Canvas, Domain, ObjectInstance, OperationCommand, OperationLimits, Operation, Placement, SceneError, SceneState,
};

pub use proxy::proxy_render;
pub use script::{emit_scene_script, replay_script, SceneScript};

/// Side length of the square ground patch objects are placed on.
pub const GROUND_EXTENT: f64 = 10.0;

/// Placement attempts per object before giving up.
pub const PLACEMENT_ATTEMPTS: usize = 64;

pub type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb3 {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb3 {
    pub fn from_points(points: &[Vec3]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        Aabb3 { min, max }
    }

    /// Strict interior overlap; boxes touching on a face do not collide.
    pub fn overlaps(&self, other: &Aabb3) -> bool {
        (0..3).all(|k| self.min[k] < other.max[k] && other.min[k] < self.max[k])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = [
                if i & 1 == 0 { self.min[0] } else { self.max[0] },
                if i & 2 == 0 { self.min[1] } else { self.max[1] },
                if i & 4 == 0 { self.min[2] } else { self.max[2] },
            ];
        }
        out
    }

    pub fn center(&self) -> Vec3 {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        ]
    }
}

/// Pinhole camera looking from `position` toward `look_at`, world up `+y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub fov_y_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for Camera {
    /// Frames the `GROUND_EXTENT` x `GROUND_EXTENT` patch centered at the
    /// origin on a square canvas.
    fn default() -> Self {
        Camera {
            position: [0.0, 9.0, 14.0],
            look_at: [0.0, 0.0, 0.0],
            fov_y_deg: 50.0,
            near: 0.1,
            far: 100.0,
        }
    }
}

/// A world point expressed in camera space and on the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    /// Pixel coordinates, origin top-left.
    pub px: f64,
    pub py: f64,
    /// Distance along the viewing direction.
    pub depth: f64,
}

impl Camera {
    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = normalize(sub(self.look_at, self.position));
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        (right, up, forward)
    }

    pub fn project(&self, p: Vec3, canvas: Canvas) -> Projected {
        let (right, up, forward) = self.basis();
        let d = sub(p, self.position);
        let depth = dot(d, forward);
        let t = (self.fov_y_deg.to_radians() / 2.0).tan();
        let aspect = canvas.width as f64 / canvas.height as f64;
        let x_ndc = dot(d, right) / (depth * t * aspect);
        let y_ndc = dot(d, up) / (depth * t);
        Projected {
            px: (x_ndc + 1.0) / 2.0 * canvas.width as f64,
            py: (1.0 - y_ndc) / 2.0 * canvas.height as f64,
            depth,
        }
    }

    /// True iff `p` lies strictly between the clip planes and projects into
    /// the image rectangle.
    pub fn sees(&self, p: Vec3, canvas: Canvas) -> bool {
        let pr = self.project(p, canvas);
        pr.depth > self.near
            && pr.depth < self.far
            && (0.0..=canvas.width as f64).contains(&pr.px)
            && (0.0..=canvas.height as f64).contains(&pr.py)
    }

    /// World-space ray through pixel coordinates `(px, py)`.
    pub fn ray(&self, px: f64, py: f64, canvas: Canvas) -> (Vec3, Vec3) {
        let (right, up, forward) = self.basis();
        let t = (self.fov_y_deg.to_radians() / 2.0).tan();
        let aspect = canvas.width as f64 / canvas.height as f64;
        let x_ndc = px / canvas.width as f64 * 2.0 - 1.0;
        let y_ndc = 1.0 - py / canvas.height as f64 * 2.0;
        let dir = [0, 1, 2].map(|k| forward[k] + right[k] * x_ndc * t * aspect + up[k] * y_ndc * t);
        (self.position, dir)
    }
}

/// Rotation matrix for intrinsic X->Y->Z angles in degrees: `Rx * Ry * Rz`.
pub fn rotation_matrix(rotation_deg: Vec3) -> [[f64; 3]; 3] {
    let [a, b, c] = rotation_deg.map(f64::to_radians);
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    matmul(&matmul(&rx, &ry), &rz)
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// Corner offsets of a box relative to its center, after scaling and
/// rotation. Index bits select the sign per axis (bit 0 -> x).
pub fn corner_offsets(extent: Vec3, scale: f64, rotation_deg: Vec3) -> [Vec3; 8] {
    let half = extent.map(|e| e * scale / 2.0);
    let r = rotation_matrix(rotation_deg);
    let mut out = [[0.0; 3]; 8];
    for (i, c) in out.iter_mut().enumerate() {
        let local = [
            if i & 1 == 0 { -half[0] } else { half[0] },
            if i & 2 == 0 { -half[1] } else { half[1] },
            if i & 4 == 0 { -half[2] } else { half[2] },
        ];
        *c = mat_vec(&r, local);
    }
    out
}

/// Box pose pulled out of an instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPose {
    pub extent: Vec3,
    pub scale: f64,
    pub position: Vec3,
    pub rotation_deg: Vec3,
}

impl BoxPose {
    pub fn of(inst: &ObjectInstance, assets: &AssetStore) -> Result<Self, SceneError> {
        let extent = assets
            .get(&inst.asset_id)
            .filter(|a| a.kind == AssetKind::Box3d)
            .and_then(|a| a.extent)
            .ok_or_else(|| SceneError::MissingAsset(inst.asset_id.clone()))?;
        let Placement::Box { position, rotation_deg } = inst.placement else {
            return Err(SceneError::InvalidState(format!(
                "instance `{}` has no box placement",
                inst.instance_id
            )));
        };
        Ok(BoxPose {
            extent,
            scale: inst.scale,
            position,
            rotation_deg,
        })
    }

    pub fn corners(&self) -> [Vec3; 8] {
        corner_offsets(self.extent, self.scale, self.rotation_deg).map(|o| {
            [
                self.position[0] + o[0],
                self.position[1] + o[1],
                self.position[2] + o[2],
            ]
        })
    }

    pub fn aabb(&self) -> Aabb3 {
        Aabb3::from_points(&self.corners())
    }
}

/// Height of the box center that puts the lowest corner exactly on `y = 0`.
pub fn grounded_height(extent: Vec3, scale: f64, rotation_deg: Vec3) -> f64 {
    let lowest = corner_offsets(extent, scale, rotation_deg)
        .iter()
        .map(|c| c[1])
        .fold(f64::INFINITY, f64::min);
    -lowest
}

pub fn world_aabb(inst: &ObjectInstance, assets: &AssetStore) -> Result<Aabb3, SceneError> {
    Ok(BoxPose::of(inst, assets)?.aabb())
}

fn camera_of(state: &SceneState) -> Result<Camera, SceneError> {
    state
        .camera
        .ok_or_else(|| SceneError::InvalidState("planning-domain state has no camera".into()))
}

/// Per instance: are all eight corners of its world AABB visible?
pub fn check_frustum(state: &SceneState, assets: &AssetStore) -> Result<Vec<bool>, SceneError> {
    let camera = camera_of(state)?;
    state
        .objects
        .iter()
        .map(|inst| {
            let aabb = world_aabb(inst, assets)?;
            Ok(aabb.corners().iter().all(|c| camera.sees(*c, state.canvas)))
        })
        .collect()
}

/// Grounding, pairwise collision, and frustum violations of a state.
pub fn check_layout(state: &SceneState, assets: &AssetStore) -> Vec<SceneError> {
    let camera = match camera_of(state) {
        Ok(c) => c,
        Err(e) => return vec![e],
    };
    let mut boxes = Vec::with_capacity(state.objects.len());
    let mut out = Vec::new();
    for inst in &state.objects {
        match world_aabb(inst, assets) {
            Ok(b) => boxes.push((inst.instance_id.as_str(), b)),
            Err(e) => out.push(e),
        }
    }
    for (i, (id, b)) in boxes.iter().enumerate() {
        if b.min[1].abs() > 1e-9 {
            out.push(SceneError::InvalidState(format!("instance `{id}` is not grounded (min.y = {})", b.min[1])));
        }
        if !b.corners().iter().all(|c| camera.sees(*c, state.canvas)) {
            out.push(SceneError::FrustumViolation(id.to_string()));
        }
        for (other, ob) in &boxes[i + 1..] {
            if b.overlaps(ob) {
                out.push(SceneError::CollisionViolation(id.to_string(), other.to_string()));
            }
        }
    }
    out
}

/// Places `objects` on the ground plane at random, one after another,
/// rejecting candidates that collide or leave the frustum.
pub fn place_objects<R: Rng + ?Sized>(
    background_id: &str,
    objects: &[&ObjectAsset],
    canvas: Canvas,
    camera: Camera,
    rng_seed: u64,
    rng: &mut R,
) -> Result<SceneState, SceneError> {
    let mut state = SceneState {
        domain: Domain::Syn,
        background_id: background_id.to_string(),
        canvas,
        objects: Vec::with_capacity(objects.len()),
        camera: Some(camera),
        rng_seed,
    };
    let half = GROUND_EXTENT / 2.0;
    let mut placed: Vec<Aabb3> = Vec::new();
    for (i, asset) in objects.iter().enumerate() {
        let extent = asset
            .extent
            .filter(|_| asset.kind == AssetKind::Box3d)
            .ok_or_else(|| SceneError::MissingAsset(asset.id.clone()))?;
        let rotation = [0.0; 3];
        let y = grounded_height(extent, 1.0, rotation);
        let mut found = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let position = [rng.random_range(-half..=half), y, rng.random_range(-half..=half)];
            let pose = BoxPose {
                extent,
                scale: 1.0,
                position,
                rotation_deg: rotation,
            };
            let aabb = pose.aabb();
            if aabb.corners().iter().all(|c| camera.sees(*c, canvas)) && placed.iter().all(|b| !b.overlaps(&aabb)) {
                found = Some((position, aabb));
                break;
            }
        }
        let (position, aabb) = found.ok_or(SceneError::PlacementExhausted(PLACEMENT_ATTEMPTS))?;
        placed.push(aabb);
        state
            .objects
            .push(ObjectInstance::cuboid(format!("inst_{i}"), asset.id.clone(), position, rotation, 1.0));
    }
    Ok(state)
}

/// Planning-domain transition. The edited box must stay grounded, inside the
/// frustum, and free of interior overlap with every other box.
pub fn apply_operation_3d(
    state: &SceneState,
    cmd: &OperationCommand,
    assets: &AssetStore,
    limits: &OperationLimits,
) -> Result<SceneState, SceneError> {
    let idx = state.index_of(&cmd.target_instance_id)?;
    crate::scene::check_kind_for_domain(Domain::Syn, &cmd.op)?;
    let camera = camera_of(state)?;
    let mut next = state.clone();
    let pose = BoxPose::of(&next.objects[idx], assets)?;
    let inst = &mut next.objects[idx];
    let Placement::Box { position, rotation_deg } = &mut inst.placement else {
        unreachable!("BoxPose::of checked the placement")
    };
    match cmd.op {
        Operation::TranslateGround { dx, dz } => {
            let len = (dx * dx + dz * dz).sqrt();
            if len > limits.ground_step_radius {
                return Err(SceneError::BoundViolation(format!(
                    "ground step {len} exceeds {}",
                    limits.ground_step_radius
                )));
            }
            position[0] += dx;
            position[2] += dz;
        }
        Operation::Scale(m) => {
            if !(m >= limits.scale_step[0] && m <= limits.scale_step[1]) {
                return Err(SceneError::BoundViolation(format!(
                    "scale step {m} outside {:?}",
                    limits.scale_step
                )));
            }
            let fs = inst.scale * m;
            if !(fs >= limits.scale_factor[0] && fs <= limits.scale_factor[1]) {
                return Err(SceneError::BoundViolation(format!(
                    "scale factor {fs} outside {:?}",
                    limits.scale_factor
                )));
            }
            inst.scale = fs;
            // bottom-center anchor: footprint center unchanged, re-grounded
            position[1] = grounded_height(pose.extent, fs, *rotation_deg);
        }
        Operation::Rotate { axis, degrees } => {
            let bound = limits.angle_bounds[axis.index()];
            if !(degrees.abs() <= bound) {
                return Err(SceneError::BoundViolation(format!(
                    "{axis:?} rotation {degrees} outside [-{bound}, {bound}]"
                )));
            }
            rotation_deg[axis.index()] += degrees;
            position[1] = grounded_height(pose.extent, inst.scale, *rotation_deg);
        }
        Operation::TranslateImage { .. } => unreachable!("checked by check_kind_for_domain"),
    }

    let moved = BoxPose::of(&next.objects[idx], assets)?.aabb();
    if !moved.corners().iter().all(|c| camera.sees(*c, state.canvas)) {
        return Err(SceneError::FrustumViolation(cmd.target_instance_id.clone()));
    }
    for (j, other) in next.objects.iter().enumerate() {
        if j != idx && world_aabb(other, assets)?.overlaps(&moved) {
            return Err(SceneError::CollisionViolation(
                cmd.target_instance_id.clone(),
                other.instance_id.clone(),
            ));
        }
    }
    Ok(next)
}
