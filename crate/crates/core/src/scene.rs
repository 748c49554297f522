//! Scene state, operation space, and the domain-independent derivations
//! (source region and target mask) built on top of the domain renderers.
//!
//! Every transition is a pure function from `(state, command)` to a new
//! state; the input state is never modified.

use std::collections::HashSet;
use std::fmt;

use image::RgbaImage;
use serde::{Deserialize, Serialize};

use crate::assets::{AssetKind, AssetStore};
use crate::planner::{self, Camera};
use crate::raster::Mask;
use crate::render_real::{self, SizeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Real,
    Syn,
}

impl Domain {
    pub fn legal_kinds(self) -> &'static [OpKind] {
        match self {
            Domain::Real => &[OpKind::T, OpKind::S],
            Domain::Syn => &[OpKind::T, OpKind::S, OpKind::X, OpKind::Y, OpKind::Z],
        }
    }

    pub fn asset_kind(self) -> AssetKind {
        match self {
            Domain::Real => AssetKind::Layer2d,
            Domain::Syn => AssetKind::Box3d,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Real => "real",
            Domain::Syn => "syn",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Canvas { width, height }
    }

    pub fn square(side: u32) -> Self {
        Canvas::new(side, side)
    }

    pub fn shortest_side(&self) -> f64 {
        self.width.min(self.height) as f64
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= self.width as f64 && p[1] <= self.height as f64
    }
}

/// Box in normalized canvas coordinates, origin top-left, `u` along the width.
/// Coordinates may fall outside `[0, 1]` for partially off-canvas objects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

impl NormBox {
    pub const FULL: NormBox = NormBox { u0: 0.0, v0: 0.0, u1: 1.0, v1: 1.0 };

    pub fn new(u0: f64, v0: f64, u1: f64, v1: f64) -> Self {
        NormBox { u0, v0, u1, v1 }
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.u0 + self.u1) / 2.0, (self.v0 + self.v1) / 2.0]
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.u0, self.v0, self.u1, self.v1]
    }
}

impl From<[f64; 4]> for NormBox {
    fn from(a: [f64; 4]) -> Self {
        NormBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        b.to_array()
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`; may extend past the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct PixelBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        PixelBox { x0, y0, x1, y1 }
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn area(&self) -> i64 {
        if self.is_empty() {
            0
        } else {
            (self.x1 - self.x0) * (self.y1 - self.y0)
        }
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0]
    }

    pub fn clip(&self, canvas: Canvas) -> Option<PixelBox> {
        let b = PixelBox::new(
            self.x0.max(0),
            self.y0.max(0),
            self.x1.min(canvas.width as i64),
            self.y1.min(canvas.height as i64),
        );
        (!b.is_empty()).then_some(b)
    }

    pub fn normalize(&self, canvas: Canvas) -> NormBox {
        let w = canvas.width as f64;
        let h = canvas.height as f64;
        NormBox::new(self.x0 as f64 / w, self.y0 as f64 / h, self.x1 as f64 / w, self.y1 as f64 / h)
    }

    /// Grows the box to include pixel `(x, y)`; an empty box becomes that pixel.
    pub fn include(&mut self, x: i64, y: i64) {
        if self.is_empty() {
            *self = PixelBox::new(x, y, x + 1, y + 1);
        } else {
            self.x0 = self.x0.min(x);
            self.y0 = self.y0.min(y);
            self.x1 = self.x1.max(x + 1);
            self.y1 = self.y1.max(y + 1);
        }
    }

    pub const EMPTY: PixelBox = PixelBox { x0: 0, y0: 0, x1: 0, y1: 0 };
}

impl From<[i64; 4]> for PixelBox {
    fn from(a: [i64; 4]) -> Self {
        PixelBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<PixelBox> for [i64; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Where an instance sits; the variant must match the asset kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Placement {
    /// Compositing domain: layer center in pixels plus a depth value.
    Layer { center_px: [f64; 2], depth: f64 },
    /// Planning domain: box center in scene units (y up) plus intrinsic
    /// X->Y->Z rotation angles in degrees.
    Box { position: [f64; 3], rotation_deg: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub instance_id: String,
    pub asset_id: String,
    /// Object scale factor `f_s`.
    pub scale: f64,
    #[serde(flatten)]
    pub placement: Placement,
}

impl ObjectInstance {
    pub fn layer(id: impl Into<String>, asset: impl Into<String>, center_px: [f64; 2], depth: f64, scale: f64) -> Self {
        ObjectInstance {
            instance_id: id.into(),
            asset_id: asset.into(),
            scale,
            placement: Placement::Layer { center_px, depth },
        }
    }

    pub fn cuboid(
        id: impl Into<String>,
        asset: impl Into<String>,
        position: [f64; 3],
        rotation_deg: [f64; 3],
        scale: f64,
    ) -> Self {
        ObjectInstance {
            instance_id: id.into(),
            asset_id: asset.into(),
            scale,
            placement: Placement::Box { position, rotation_deg },
        }
    }
}

/// A full scene configuration for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub domain: Domain,
    pub background_id: String,
    pub canvas: Canvas,
    pub objects: Vec<ObjectInstance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
    pub rng_seed: u64,
}

impl SceneState {
    pub fn instance(&self, id: &str) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.instance_id == id)
    }

    pub fn index_of(&self, id: &str) -> Result<usize, SceneError> {
        self.objects
            .iter()
            .position(|o| o.instance_id == id)
            .ok_or_else(|| SceneError::UnknownInstance(id.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    T,
    S,
    X,
    Y,
    Z,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [OpKind::T, OpKind::S, OpKind::X, OpKind::Y, OpKind::Z];

    /// Slot of this kind inside the operation condition block.
    pub fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Operation type and value.
///
/// Wire form is `{"kind": "T"|"S"|"X"|"Y"|"Z", "value": ...}` where `value`
/// is `[dx, dy, dd]` or `[dx, dz]` for translations and a number otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOperation", into = "RawOperation")]
pub enum Operation {
    /// Pixel offsets plus a depth offset (compositing domain).
    TranslateImage { dx: f64, dy: f64, dd: f64 },
    /// Ground-plane offset in scene units (planning domain).
    TranslateGround { dx: f64, dz: f64 },
    /// Multiplier applied to the scale factor.
    Scale(f64),
    Rotate { axis: Axis, degrees: f64 },
}

impl Operation {
    pub fn kind(&self) -> OpKind {
        match self {
            Operation::TranslateImage { .. } | Operation::TranslateGround { .. } => OpKind::T,
            Operation::Scale(_) => OpKind::S,
            Operation::Rotate { axis: Axis::X, .. } => OpKind::X,
            Operation::Rotate { axis: Axis::Y, .. } => OpKind::Y,
            Operation::Rotate { axis: Axis::Z, .. } => OpKind::Z,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match *self {
            Operation::TranslateImage { dx, dy, dd } => vec![dx, dy, dd],
            Operation::TranslateGround { dx, dz } => vec![dx, dz],
            Operation::Scale(m) => vec![m],
            Operation::Rotate { degrees, .. } => vec![degrees],
        }
    }

    pub fn from_parts(kind: OpKind, values: &[f64]) -> Result<Self, String> {
        let op = match (kind, values) {
            (OpKind::T, [dx, dy, dd]) => Operation::TranslateImage { dx: *dx, dy: *dy, dd: *dd },
            (OpKind::T, [dx, dz]) => Operation::TranslateGround { dx: *dx, dz: *dz },
            (OpKind::S, [m]) => Operation::Scale(*m),
            (OpKind::X, [a]) => Operation::Rotate { axis: Axis::X, degrees: *a },
            (OpKind::Y, [a]) => Operation::Rotate { axis: Axis::Y, degrees: *a },
            (OpKind::Z, [a]) => Operation::Rotate { axis: Axis::Z, degrees: *a },
            (kind, v) => return Err(format!("operation {kind} cannot take {} value(s)", v.len())),
        };
        if op.values().iter().any(|v| !v.is_finite()) {
            return Err("operation values must be finite".into());
        }
        Ok(op)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
struct RawOperation {
    kind: OpKind,
    value: RawValue,
}

impl TryFrom<RawOperation> for Operation {
    type Error = String;

    fn try_from(raw: RawOperation) -> Result<Self, Self::Error> {
        let values = match raw.value {
            RawValue::Scalar(v) => vec![v],
            RawValue::Vector(v) => v,
        };
        Operation::from_parts(raw.kind, &values)
    }
}

impl From<Operation> for RawOperation {
    fn from(op: Operation) -> Self {
        let value = match op {
            Operation::Scale(m) => RawValue::Scalar(m),
            Operation::Rotate { degrees, .. } => RawValue::Scalar(degrees),
            other => RawValue::Vector(other.values()),
        };
        RawOperation { kind: op.kind(), value }
    }
}

/// A user command: which instance, and what to do with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationCommand {
    pub target_instance_id: String,
    #[serde(flatten)]
    pub op: Operation,
}

impl OperationCommand {
    pub fn new(target: impl Into<String>, op: Operation) -> Self {
        OperationCommand {
            target_instance_id: target.into(),
            op,
        }
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

/// A command together with its derived source region and target region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationRecord {
    pub command: OperationCommand,
    pub source_centroid: [f64; 2],
    pub source_bbox: NormBox,
    /// `None` when the target region was not provided (mask omitted).
    pub target_bbox: Option<NormBox>,
    pub round_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub instance_id: String,
    /// Tight box of the instance footprint, unclipped.
    pub bbox_px: PixelBox,
    pub clipped_bbox_px: Option<PixelBox>,
    pub centroid_px: [f64; 2],
    /// Visible on-canvas pixels over all footprint pixels.
    pub visible_fraction: f64,
    /// Position in back-to-front order; 0 is the farthest instance.
    pub depth_rank: usize,
}

/// A rendered frame plus per-instance annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: RgbaImage,
    pub annotations: Vec<Annotation>,
}

impl Observation {
    pub fn annotation(&self, instance_id: &str) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.instance_id == instance_id)
    }
}

/// Per-step and absolute bounds every transition must honor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperationLimits {
    pub scale_factor: [f64; 2],
    pub depth: [f64; 2],
    /// Per-step pixel offset bound, as a fraction of the canvas shortest side.
    pub center_offset_frac: f64,
    pub depth_offset: f64,
    pub scale_step: [f64; 2],
    /// Symmetric per-step angle bounds in degrees for X, Y and Z.
    pub angle_bounds: [f64; 3],
    /// Maximum ground translation length per step (scene units).
    pub ground_step_radius: f64,
}

impl Default for OperationLimits {
    fn default() -> Self {
        OperationLimits {
            scale_factor: [0.2, 4.0],
            depth: [10.0, 200.0],
            center_offset_frac: 0.6,
            depth_offset: 30.0,
            scale_step: [0.2, 4.0],
            angle_bounds: [50.0, 45.0, 60.0],
            ground_step_radius: 0.6 * planner::GROUND_EXTENT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("operation {kind} is not legal in the {domain} domain")]
    IllegalKindForDomain { kind: OpKind, domain: Domain },
    #[error("bound violation: {0}")]
    BoundViolation(String),
    #[error("instance `{0}` has an empty footprint")]
    DegenerateFootprint(String),
    #[error("computed size {0:.4}px is below one pixel")]
    SubpixelSize(f64),
    #[error("missing asset `{0}`")]
    MissingAsset(String),
    #[error("instances `{0}` and `{1}` collide")]
    CollisionViolation(String, String),
    #[error("instance `{0}` leaves the view frustum")]
    FrustumViolation(String),
    #[error("placement exhausted after {0} attempts")]
    PlacementExhausted(usize),
    #[error("inconsistent sequence: {0}")]
    InconsistentSequence(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
}

impl SceneError {
    pub fn code(&self) -> &'static str {
        match self {
            SceneError::UnknownInstance(_) => "UnknownInstance",
            SceneError::IllegalKindForDomain { .. } => "IllegalKindForDomain",
            SceneError::BoundViolation(_) => "BoundViolation",
            SceneError::DegenerateFootprint(_) => "DegenerateFootprint",
            SceneError::SubpixelSize(_) => "SubpixelSize",
            SceneError::MissingAsset(_) => "MissingAsset",
            SceneError::CollisionViolation(..) => "CollisionViolation",
            SceneError::FrustumViolation(_) => "FrustumViolation",
            SceneError::PlacementExhausted(_) => "PlacementExhausted",
            SceneError::InconsistentSequence(_) => "InconsistentSequence",
            SceneError::InvalidState(_) => "InvalidState",
        }
    }
}

/// Applies `cmd` to `state` under the default limits.
pub fn apply_operation(state: &SceneState, cmd: &OperationCommand, assets: &AssetStore) -> Result<SceneState, SceneError> {
    apply_operation_with(state, cmd, assets, &OperationLimits::default())
}

pub fn apply_operation_with(
    state: &SceneState,
    cmd: &OperationCommand,
    assets: &AssetStore,
    limits: &OperationLimits,
) -> Result<SceneState, SceneError> {
    let idx = state.index_of(&cmd.target_instance_id)?;
    check_kind_for_domain(state.domain, &cmd.op)?;
    match state.domain {
        Domain::Real => apply_real(state, idx, &cmd.op, limits),
        Domain::Syn => planner::apply_operation_3d(state, cmd, assets, limits),
    }
}

pub fn check_kind_for_domain(domain: Domain, op: &Operation) -> Result<(), SceneError> {
    let ok = matches!(
        (domain, op),
        (Domain::Real, Operation::TranslateImage { .. })
            | (Domain::Real, Operation::Scale(_))
            | (Domain::Syn, Operation::TranslateGround { .. })
            | (Domain::Syn, Operation::Scale(_))
            | (Domain::Syn, Operation::Rotate { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(SceneError::IllegalKindForDomain { kind: op.kind(), domain })
    }
}

fn in_range(v: f64, range: [f64; 2]) -> bool {
    v >= range[0] && v <= range[1]
}

fn apply_real(state: &SceneState, idx: usize, op: &Operation, limits: &OperationLimits) -> Result<SceneState, SceneError> {
    let mut next = state.clone();
    let inst = &mut next.objects[idx];
    let Placement::Layer { center_px, depth } = &mut inst.placement else {
        return Err(SceneError::InvalidState(format!(
            "instance `{}` has no layer placement",
            inst.instance_id
        )));
    };
    match *op {
        Operation::TranslateImage { dx, dy, dd } => {
            let max_offset = limits.center_offset_frac * state.canvas.shortest_side();
            if dx.abs() > max_offset || dy.abs() > max_offset {
                return Err(SceneError::BoundViolation(format!(
                    "center offset ({dx}, {dy}) exceeds {max_offset}"
                )));
            }
            if dd.abs() > limits.depth_offset {
                return Err(SceneError::BoundViolation(format!(
                    "depth offset {dd} exceeds {}",
                    limits.depth_offset
                )));
            }
            let new_center = [center_px[0] + dx, center_px[1] + dy];
            if !state.canvas.contains(new_center) {
                return Err(SceneError::BoundViolation(format!(
                    "center ({}, {}) leaves the canvas",
                    new_center[0], new_center[1]
                )));
            }
            let new_depth = *depth + dd;
            if !in_range(new_depth, limits.depth) {
                return Err(SceneError::BoundViolation(format!("depth {new_depth} outside {:?}", limits.depth)));
            }
            *center_px = new_center;
            *depth = new_depth;
        }
        Operation::Scale(m) => {
            if !(m.is_finite() && m > 0.0) {
                return Err(SceneError::BoundViolation(format!("scale multiplier {m} must be positive")));
            }
            let fs = inst.scale * m;
            if !in_range(fs, limits.scale_factor) {
                return Err(SceneError::BoundViolation(format!(
                    "scale factor {fs} outside {:?}",
                    limits.scale_factor
                )));
            }
            inst.scale = fs;
        }
        _ => unreachable!("checked by check_kind_for_domain"),
    }
    let Placement::Layer { depth, .. } = inst.placement else { unreachable!() };
    let size = render_real::compute_object_size(depth, inst.scale, &SizeConfig::for_canvas(state.canvas))?;
    if size < 1.0 {
        return Err(SceneError::BoundViolation(format!("object size {size:.4}px below one pixel")));
    }
    Ok(next)
}

/// Tight pixel footprint of one instance rendered alone.
pub fn footprint(state: &SceneState, assets: &AssetStore, instance_id: &str) -> Result<PixelBox, SceneError> {
    let idx = state.index_of(instance_id)?;
    let bbox = match state.domain {
        Domain::Real => {
            let inst = &state.objects[idx];
            let asset = assets
                .get(&inst.asset_id)
                .ok_or_else(|| SceneError::MissingAsset(inst.asset_id.clone()))?;
            render_real::rasterize_layer(asset, inst, state.canvas)?.footprint
        }
        Domain::Syn => planner::proxy::silhouette_box(state, assets, idx)?,
    };
    if bbox.is_empty() {
        return Err(SceneError::DegenerateFootprint(instance_id.to_string()));
    }
    Ok(bbox)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceRegion {
    pub centroid: [f64; 2],
    pub bbox: NormBox,
}

impl SourceRegion {
    pub fn from_pixels(bbox: PixelBox, canvas: Canvas) -> Self {
        let bbox = bbox.normalize(canvas);
        SourceRegion {
            centroid: bbox.center(),
            bbox,
        }
    }
}

/// Normalized centroid and tight box of an instance before manipulation.
pub fn derive_source_region(state: &SceneState, assets: &AssetStore, instance_id: &str) -> Result<SourceRegion, SceneError> {
    let bbox = footprint(state, assets, instance_id)?;
    Ok(SourceRegion::from_pixels(bbox, state.canvas))
}

/// Target mask on an `h` x `w` grid derived from the instance's box in
/// `state_after`; all zero when `omit` is set.
pub fn derive_target_mask(
    state_after: &SceneState,
    assets: &AssetStore,
    instance_id: &str,
    grid: (usize, usize),
    omit: bool,
) -> Result<Mask, SceneError> {
    let bbox = footprint(state_after, assets, instance_id)?;
    if omit {
        return Ok(Mask::zeros(grid.0, grid.1));
    }
    Ok(Mask::from_box(&bbox.normalize(state_after.canvas), grid.0, grid.1))
}

/// Renders a state with its domain's renderer.
pub fn render(state: &SceneState, assets: &AssetStore) -> Result<Observation, SceneError> {
    match state.domain {
        Domain::Real => render_real::composite(state, assets),
        Domain::Syn => planner::proxy_render(state, assets),
    }
}

/// Builds the record for `cmd` taking `before` to `after`. The target box is
/// left out when `with_target` is false.
pub fn build_record(
    before: &SceneState,
    after: &SceneState,
    cmd: &OperationCommand,
    assets: &AssetStore,
    round_index: usize,
    with_target: bool,
) -> Result<OperationRecord, SceneError> {
    let src = derive_source_region(before, assets, &cmd.target_instance_id)?;
    let target_bbox = if with_target {
        Some(footprint(after, assets, &cmd.target_instance_id)?.normalize(after.canvas))
    } else {
        None
    };
    Ok(OperationRecord {
        command: cmd.clone(),
        source_centroid: src.centroid,
        source_bbox: src.bbox,
        target_bbox,
        round_index,
    })
}

/// Checks every state invariant; returns all violations found.
pub fn validate_state(state: &SceneState, assets: &AssetStore) -> Vec<SceneError> {
    validate_state_with(state, assets, &OperationLimits::default())
}

pub fn validate_state_with(state: &SceneState, assets: &AssetStore, limits: &OperationLimits) -> Vec<SceneError> {
    let mut out = Vec::new();
    if state.canvas.width == 0 || state.canvas.height == 0 {
        out.push(SceneError::InvalidState("canvas must be non-empty".into()));
    }
    let mut seen = HashSet::new();
    for inst in &state.objects {
        if !seen.insert(inst.instance_id.as_str()) {
            out.push(SceneError::InvalidState(format!("duplicate instance id `{}`", inst.instance_id)));
        }
        match assets.get(&inst.asset_id) {
            None => out.push(SceneError::MissingAsset(inst.asset_id.clone())),
            Some(a) if a.kind != state.domain.asset_kind() => out.push(SceneError::InvalidState(format!(
                "asset `{}` kind does not match the {} domain",
                a.id, state.domain
            ))),
            Some(_) => {}
        }
        if !in_range(inst.scale, limits.scale_factor) {
            out.push(SceneError::BoundViolation(format!(
                "instance `{}` scale factor {} outside {:?}",
                inst.instance_id, inst.scale, limits.scale_factor
            )));
        }
        match (&inst.placement, state.domain) {
            (Placement::Layer { center_px, depth }, Domain::Real) => {
                if !in_range(*depth, limits.depth) {
                    out.push(SceneError::BoundViolation(format!(
                        "instance `{}` depth {depth} outside {:?}",
                        inst.instance_id, limits.depth
                    )));
                }
                if !state.canvas.contains(*center_px) {
                    out.push(SceneError::BoundViolation(format!(
                        "instance `{}` center leaves the canvas",
                        inst.instance_id
                    )));
                }
            }
            (Placement::Box { .. }, Domain::Syn) => {}
            _ => out.push(SceneError::InvalidState(format!(
                "instance `{}` placement does not match the {} domain",
                inst.instance_id, state.domain
            ))),
        }
    }
    if state.domain == Domain::Syn && out.is_empty() {
        out.extend(planner::check_layout(state, assets));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::{AlphaMode, ObjectAsset};
    use image::Rgba;

    fn store() -> AssetStore {
        let mut s = AssetStore::new();
        s.insert(
            ObjectAsset::layer("bg", RgbaImage::from_pixel(8, 8, Rgba([0, 0, 0, 255])), AlphaMode::Straight, vec!["background".into()])
                .unwrap(),
        )
        .unwrap();
        s.insert(
            ObjectAsset::layer("sq", RgbaImage::from_pixel(100, 100, Rgba([255, 0, 0, 255])), AlphaMode::Straight, vec![])
                .unwrap(),
        )
        .unwrap();
        s
    }

    fn real_state(center: [f64; 2], depth: f64, scale: f64) -> SceneState {
        SceneState {
            domain: Domain::Real,
            background_id: "bg".into(),
            canvas: Canvas::square(512),
            objects: vec![ObjectInstance::layer("a", "sq", center, depth, scale)],
            camera: None,
            rng_seed: 0,
        }
    }

    fn cmd(op: Operation) -> OperationCommand {
        OperationCommand::new("a", op)
    }

    #[test]
    fn identity_translation_is_a_no_op() {
        let s = real_state([200.0, 300.0], 50.0, 1.0);
        let next = apply_operation(&s, &cmd(Operation::TranslateImage { dx: 0.0, dy: 0.0, dd: 0.0 }), &store()).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn scale_updates_only_the_factor() {
        let s = real_state([200.0, 300.0], 50.0, 1.0);
        let next = apply_operation(&s, &cmd(Operation::Scale(2.0)), &store()).unwrap();
        assert_eq!(next.objects[0].scale, 2.0);
        assert_eq!(next.objects[0].placement, s.objects[0].placement);
    }

    #[test]
    fn scale_past_upper_bound_is_rejected() {
        let s = real_state([200.0, 300.0], 50.0, 1.0);
        let err = apply_operation(&s, &cmd(Operation::Scale(5.0)), &store()).unwrap_err();
        assert_eq!(err.code(), "BoundViolation");
    }

    #[test]
    fn rotation_is_illegal_in_real_domain() {
        let s = real_state([200.0, 300.0], 50.0, 1.0);
        let err = apply_operation(&s, &cmd(Operation::Rotate { axis: Axis::X, degrees: 10.0 }), &store()).unwrap_err();
        assert_eq!(err, SceneError::IllegalKindForDomain { kind: OpKind::X, domain: Domain::Real });
        let err = apply_operation(&s, &cmd(Operation::TranslateGround { dx: 1.0, dz: 0.0 }), &store()).unwrap_err();
        assert_eq!(err.code(), "IllegalKindForDomain");
    }

    #[test]
    fn unknown_instance_is_reported() {
        let s = real_state([200.0, 300.0], 50.0, 1.0);
        let err = apply_operation(&s, &OperationCommand::new("zz", Operation::Scale(1.0)), &store()).unwrap_err();
        assert_eq!(err, SceneError::UnknownInstance("zz".into()));
    }

    #[test]
    fn centroid_must_stay_on_canvas() {
        let s = real_state([10.0, 10.0], 50.0, 1.0);
        let err = apply_operation(&s, &cmd(Operation::TranslateImage { dx: -20.0, dy: 0.0, dd: 0.0 }), &store()).unwrap_err();
        assert_eq!(err.code(), "BoundViolation");
    }

    #[test]
    fn depth_bounds_and_step_bounds() {
        let s = real_state([100.0, 100.0], 190.0, 1.0);
        let over_depth = cmd(Operation::TranslateImage { dx: 0.0, dy: 0.0, dd: 20.0 });
        assert!(apply_operation(&s, &over_depth, &store()).is_err());
        let big_step = cmd(Operation::TranslateImage { dx: 308.0, dy: 0.0, dd: 0.0 });
        assert!(apply_operation(&real_state([0.0, 0.0], 50.0, 1.0), &big_step, &store()).is_err());
        let big_depth_step = cmd(Operation::TranslateImage { dx: 0.0, dy: 0.0, dd: -31.0 });
        assert!(apply_operation(&s, &big_depth_step, &store()).is_err());
    }

    #[test]
    fn inverse_translation_restores_placement() {
        let s = real_state([123.25, 77.5], 42.0, 1.5);
        let fwd = cmd(Operation::TranslateImage { dx: 31.7, dy: -12.9, dd: 17.3 });
        let back = cmd(Operation::TranslateImage { dx: -31.7, dy: 12.9, dd: -17.3 });
        let st = store();
        let restored = apply_operation(&apply_operation(&s, &fwd, &st).unwrap(), &back, &st).unwrap();
        let (Placement::Layer { center_px: a, depth: da }, Placement::Layer { center_px: b, depth: db }) =
            (&s.objects[0].placement, &restored.objects[0].placement)
        else {
            panic!()
        };
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9 && (da - db).abs() < 1e-9);
    }

    #[test]
    fn source_region_of_a_centered_square() {
        // d=10, f_s=1 on 512^2 gives a 128px layer centered at 256.
        let s = real_state([256.0, 256.0], 10.0, 1.0);
        let region = derive_source_region(&s, &store(), "a").unwrap();
        assert_eq!(region.centroid, [0.5, 0.5]);
        assert!(region.bbox.u0 <= region.centroid[0] && region.centroid[0] <= region.bbox.u1);
    }

    #[test]
    fn source_region_half_off_left_edge_is_negative() {
        let s = real_state([0.0, 256.0], 10.0, 1.0);
        let region = derive_source_region(&s, &store(), "a").unwrap();
        assert!(region.bbox.u0 < 0.0);
    }

    #[test]
    fn target_mask_full_and_omitted() {
        // size 128 * 4 = 512 at d=10, f_s=4: the square covers the canvas.
        let s = real_state([256.0, 256.0], 10.0, 4.0);
        let full = derive_target_mask(&s, &store(), "a", (8, 8), false).unwrap();
        assert_eq!(full, Mask::ones(8, 8));
        let omitted = derive_target_mask(&s, &store(), "a", (8, 8), true).unwrap();
        assert_eq!(omitted, Mask::zeros(8, 8));
    }

    #[test]
    fn operation_wire_format() {
        let c = OperationCommand::new("obj", Operation::TranslateImage { dx: 1.0, dy: -2.0, dd: 0.5 });
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, r#"{"target_instance_id":"obj","kind":"T","value":[1.0,-2.0,0.5]}"#);
        let back: OperationCommand = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let s: Operation = serde_json::from_str(r#"{"kind":"S","value":2}"#).unwrap();
        assert_eq!(s, Operation::Scale(2.0));
        assert!(serde_json::from_str::<Operation>(r#"{"kind":"S","value":[1,2]}"#).is_err());
        assert!(serde_json::from_str::<Operation>(r#"{"kind":"Q","value":1}"#).is_err());
    }

    #[test]
    fn placement_serializes_flat() {
        let inst = ObjectInstance::layer("a", "sq", [1.0, 2.0], 30.0, 1.0);
        let v = serde_json::to_value(&inst).unwrap();
        assert_eq!(v["depth"], 30.0);
        let back: ObjectInstance = serde_json::from_value(v).unwrap();
        assert_eq!(back, inst);
        let b = ObjectInstance::cuboid("b", "box", [1.0, 0.5, 2.0], [0.0, 10.0, 0.0], 1.0);
        let back: ObjectInstance = serde_json::from_value(serde_json::to_value(&b).unwrap()).unwrap();
        assert_eq!(back, b);
    }
}
