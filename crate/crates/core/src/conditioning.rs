//! Operation encoder (Fourier features, null blending, two-layer MLP), token
//! assembly, and the frame encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::Mask;
use crate::render_real::SizeConfig;
use crate::scene::{Canvas, OpKind, Operation, OperationRecord};
use crate::weights::{WeightError, WeightFile};

pub const DEFAULT_BANDS: usize = 8;
pub const DEFAULT_EMBED_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConditionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// `[sin(2^j pi v), cos(2^j pi v)]` for every component `v` and band `j`,
/// component-major.
pub fn fourier_embed(values: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands * values.len());
    for &v in values {
        for j in 0..bands {
            let a = (1u64 << j) as f64 * std::f64::consts::PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// The seven condition slots of one round, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Centroid,
    BBox,
    T,
    S,
    X,
    Y,
    Z,
}

impl Slot {
    pub const ALL: [Slot; 7] = [Slot::Centroid, Slot::BBox, Slot::T, Slot::S, Slot::X, Slot::Y, Slot::Z];

    /// Raw condition dimension `k`.
    pub fn dim(self) -> usize {
        match self {
            Slot::Centroid => 2,
            Slot::BBox => 4,
            Slot::T => 3,
            Slot::S | Slot::X | Slot::Y | Slot::Z => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::Centroid => "centroid",
            Slot::BBox => "bbox",
            Slot::T => "T",
            Slot::S => "S",
            Slot::X => "X",
            Slot::Y => "Y",
            Slot::Z => "Z",
        }
    }

    pub fn for_kind(kind: OpKind) -> Slot {
        match kind {
            OpKind::T => Slot::T,
            OpKind::S => Slot::S,
            OpKind::X => Slot::X,
            OpKind::Y => Slot::Y,
            OpKind::Z => Slot::Z,
        }
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn as f32 so that a
    /// round trip through a weight file is exact.
    pub fn kaiming<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        Dense {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-bound..=bound) as f64).collect(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `W x + b` for `W` of shape `rows x cols`.
    pub fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias[r]
            })
            .collect()
    }
}

/// Per-slot encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotEncoder {
    pub null: Vec<f64>,
    pub w1: Dense,
    pub b1: Vec<f64>,
    pub w2: Dense,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub bands: usize,
    pub embed_dim: usize,
    /// Indexed like `Slot::ALL`.
    pub slots: Vec<SlotEncoder>,
}

impl EncoderParams {
    pub fn new(bands: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = 2 * embed_dim;
        let slots = Slot::ALL
            .iter()
            .map(|s| {
                let fdim = 2 * bands * s.dim();
                SlotEncoder {
                    null: (0..fdim).map(|_| rng.random_range(-1.0f32..=1.0) as f64).collect(),
                    w1: Dense::kaiming(hidden, fdim, fdim, &mut rng),
                    b1: vec![0.0; hidden],
                    w2: Dense::kaiming(embed_dim, hidden, hidden, &mut rng),
                    b2: vec![0.0; embed_dim],
                }
            })
            .collect();
        EncoderParams { bands, embed_dim, slots }
    }

    pub fn fourier_dim(&self, slot: Slot) -> usize {
        2 * self.bands * slot.dim()
    }

    pub fn token_dim(&self) -> usize {
        Slot::ALL.len() * self.embed_dim
    }

    fn slot(&self, slot: Slot) -> &SlotEncoder {
        &self.slots[Slot::ALL.iter().position(|s| *s == slot).expect("slot listed")]
    }

    pub fn to_weights(&self, file: &mut WeightFile) {
        for s in Slot::ALL {
            let e = self.slot(s);
            let n = s.name();
            file.insert(format!("encoder.{n}.null"), vec![e.null.len()], &e.null);
            file.insert(format!("encoder.{n}.w1"), vec![e.w1.rows, e.w1.cols], &e.w1.data);
            file.insert(format!("encoder.{n}.b1"), vec![e.b1.len()], &e.b1);
            file.insert(format!("encoder.{n}.w2"), vec![e.w2.rows, e.w2.cols], &e.w2.data);
            file.insert(format!("encoder.{n}.b2"), vec![e.b2.len()], &e.b2);
        }
    }

    pub fn from_weights(file: &WeightFile, bands: usize, embed_dim: usize) -> Result<Self, WeightError> {
        let hidden = 2 * embed_dim;
        let mut slots = Vec::new();
        for s in Slot::ALL {
            let n = s.name();
            let fdim = 2 * bands * s.dim();
            slots.push(SlotEncoder {
                null: file.get(&format!("encoder.{n}.null"), &[fdim])?,
                w1: Dense {
                    rows: hidden,
                    cols: fdim,
                    data: file.get(&format!("encoder.{n}.w1"), &[hidden, fdim])?,
                },
                b1: file.get(&format!("encoder.{n}.b1"), &[hidden])?,
                w2: Dense {
                    rows: embed_dim,
                    cols: hidden,
                    data: file.get(&format!("encoder.{n}.w2"), &[embed_dim, hidden])?,
                },
                b2: file.get(&format!("encoder.{n}.b2"), &[embed_dim])?,
            });
        }
        Ok(EncoderParams { bands, embed_dim, slots })
    }
}

/// `MLP(m * Fourier(c) + (1 - m) * e_null)` for one slot.
pub fn encode_condition(slot: Slot, c: &[f64], present: bool, params: &EncoderParams) -> Result<Vec<f64>, ConditionError> {
    if c.len() != slot.dim() {
        return Err(ConditionError::DimensionMismatch {
            expected: slot.dim(),
            got: c.len(),
        });
    }
    let enc = params.slot(slot);
    let input = if present {
        fourier_embed(c, params.bands)
    } else {
        enc.null.clone()
    };
    let hidden: Vec<f64> = enc.w1.affine(&input, &enc.b1).into_iter().map(gelu).collect();
    Ok(enc.w2.affine(&hidden, &enc.b2))
}

/// Raw condition value of the operation slot, normalized to order one.
///
/// Translations map to `(right, down, farther)` components: image-domain
/// offsets are divided by the canvas size and the depth range, ground
/// offsets by the ground extent (`-dz` since `+z` points toward the camera).
pub fn operation_values(op: &Operation, canvas: Canvas) -> Vec<f64> {
    match *op {
        Operation::TranslateImage { dx, dy, dd } => vec![
            dx / canvas.width as f64,
            dy / canvas.height as f64,
            dd / (SizeConfig::D_MAX - SizeConfig::D_MIN),
        ],
        Operation::TranslateGround { dx, dz } => vec![
            dx / crate::planner::GROUND_EXTENT,
            0.0,
            -dz / crate::planner::GROUND_EXTENT,
        ],
        Operation::Scale(m) => vec![m],
        Operation::Rotate { degrees, .. } => vec![degrees / 180.0],
    }
}

/// Where each slot sits inside a token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub embed_dim: usize,
    pub slots: Vec<(Slot, usize)>,
}

impl TokenLayout {
    pub fn operation(embed_dim: usize) -> Self {
        TokenLayout {
            embed_dim,
            slots: Slot::ALL.iter().enumerate().map(|(i, s)| (*s, i * embed_dim)).collect(),
        }
    }

    pub fn offset(&self, slot: Slot) -> usize {
        self.slots.iter().find(|(s, _)| *s == slot).map(|(_, o)| *o).expect("slot in layout")
    }
}

/// Frames x tokens x channels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub frames: usize,
    pub tokens: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub layout: TokenLayout,
}

impl FeatureBlock {
    pub fn token(&self, frame: usize, token: usize) -> &[f64] {
        let start = (frame * self.tokens + token) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// One slot's embedding out of one token.
    pub fn slot(&self, frame: usize, token: usize, slot: Slot) -> &[f64] {
        let off = self.layout.offset(slot);
        &self.token(frame, token)[off..off + self.layout.embed_dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Tokens for a history of `r` records: token 0 is all-null, token `i + 1`
/// encodes record `i`.
pub fn assemble_operation_tokens(
    records: &[OperationRecord],
    canvas: Canvas,
    params: &EncoderParams,
) -> Result<FeatureBlock, ConditionError> {
    let layout = TokenLayout::operation(params.embed_dim);
    let channels = params.token_dim();
    let mut data = Vec::with_capacity((records.len() + 1) * channels);
    for token in 0..=records.len() {
        let rec = token.checked_sub(1).map(|i| &records[i]);
        for slot in Slot::ALL {
            let (values, present) = match (slot, rec) {
                (_, None) => (vec![0.0; slot.dim()], false),
                (Slot::Centroid, Some(r)) => (r.source_centroid.to_vec(), true),
                (Slot::BBox, Some(r)) => (r.source_bbox.to_array().to_vec(), true),
                (s, Some(r)) if Slot::for_kind(r.command.kind()) == s => (operation_values(&r.command.op, canvas), true),
                (s, Some(_)) => (vec![0.0; s.dim()], false),
            };
            data.extend(encode_condition(slot, &values, present, params)?);
        }
    }
    Ok(FeatureBlock {
        frames: 1,
        tokens: records.len() + 1,
        channels,
        data,
        layout,
    })
}

/// Channel-major image stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ChannelStack {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ChannelStack {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// `[x_0 .. x_{r-1}, M_tgt]`: four channels per frame scaled to `[0, 1]`,
/// then the mask.
pub fn assemble_frame_input(frames: &[image::RgbaImage], target: &Mask) -> Result<ChannelStack, ConditionError> {
    let (w, h) = frames.first().map(|f| f.dimensions()).unwrap_or((target.width as u32, target.height as u32));
    if frames.iter().any(|f| f.dimensions() != (w, h)) {
        return Err(ConditionError::ShapeMismatch("frames differ in size".into()));
    }
    if (target.width, target.height) != (w as usize, h as usize) {
        return Err(ConditionError::ShapeMismatch(format!(
            "mask is {}x{}, frames are {w}x{h}",
            target.width, target.height
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let mut stack = ChannelStack::zeros(4 * frames.len() + 1, h, w);
    for (i, f) in frames.iter().enumerate() {
        for (x, y, p) in f.enumerate_pixels() {
            for c in 0..4 {
                *stack.at_mut(4 * i + c, y as usize, x as usize) = p.0[c] as f64 / 255.0;
            }
        }
    }
    let last = 4 * frames.len();
    for y in 0..h {
        for x in 0..w {
            *stack.at_mut(last, y, x) = target.cells[y * w + x] as f64;
        }
    }
    Ok(stack)
}

/// 3x3 convolution weights, `out x in x 3 x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3 {
    pub out_ch: usize,
    pub in_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3 {
    fn random<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, rng: &mut R) -> Self {
        let w = Dense::kaiming(out_ch, in_ch * 9, in_ch * 9, rng);
        Conv3 {
            out_ch,
            in_ch,
            weight: w.data,
            bias: vec![0.0; out_ch],
        }
    }

    /// Zero-padded convolution with the given stride.
    pub fn apply(&self, x: &ChannelStack, stride: usize) -> ChannelStack {
        let oh = x.height.div_ceil(stride);
        let ow = x.width.div_ceil(stride);
        let mut out = ChannelStack::zeros(self.out_ch, oh, ow);
        for o in 0..self.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_ch {
                        for ky in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            if iy < 0 || iy >= x.height as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - 1;
                                if ix < 0 || ix >= x.width as isize {
                                    continue;
                                }
                                acc += self.weight[((o * self.in_ch + i) * 3 + ky) * 3 + kx]
                                    * x.at(i, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(o, oy, ox) = acc;
                }
            }
        }
        out
    }
}

/// One downsampling residual stage:
/// `avgpool2(x) + conv(gelu(conv_s2(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DownStage {
    pub down: Conv3,
    pub conv: Conv3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEncoderParams {
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub stem: Conv3,
    pub stages: Vec<DownStage>,
    /// Final 1x1 projection, `out x hidden`; zero at initialization.
    pub proj: Dense,
    pub proj_bias: Vec<f64>,
}

impl FrameEncoderParams {
    pub fn new(in_channels: usize, hidden: usize, out_channels: usize, stages: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv3::random(hidden, in_channels, &mut rng);
        let stages = (0..stages)
            .map(|_| DownStage {
                down: Conv3::random(hidden, hidden, &mut rng),
                conv: Conv3::random(hidden, hidden, &mut rng),
            })
            .collect();
        FrameEncoderParams {
            in_channels,
            hidden,
            out_channels,
            stem,
            stages,
            proj: Dense::zeros(out_channels, hidden),
            proj_bias: vec![0.0; out_channels],
        }
    }
}

fn avg_pool2(x: &ChannelStack) -> ChannelStack {
    let oh = x.height.div_ceil(2);
    let ow = x.width.div_ceil(2);
    let mut out = ChannelStack::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0;
                let mut n = 0.0;
                for y in 2 * oy..(2 * oy + 2).min(x.height) {
                    for xx in 2 * ox..(2 * ox + 2).min(x.width) {
                        sum += x.at(c, y, xx);
                        n += 1.0;
                    }
                }
                *out.at_mut(c, oy, ox) = sum / n;
            }
        }
    }
    out
}

/// Encodes a channel stack to an `out_channels x out_h x out_w` map. The
/// input must be exactly `2^stages` times larger than the output.
pub fn frame_encode(stack: &ChannelStack, params: &FrameEncoderParams, out_dims: (usize, usize)) -> Result<ChannelStack, ConditionError> {
    if stack.channels != params.in_channels {
        return Err(ConditionError::ShapeMismatch(format!(
            "stack has {} channels, encoder expects {}",
            stack.channels, params.in_channels
        )));
    }
    let f = 1usize << params.stages.len();
    if stack.height != out_dims.0 * f || stack.width != out_dims.1 * f {
        return Err(ConditionError::ShapeMismatch(format!(
            "{}x{} input does not reduce to {}x{} in {} stages",
            stack.height,
            stack.width,
            out_dims.0,
            out_dims.1,
            params.stages.len()
        )));
    }
    let mut x = params.stem.apply(stack, 1);
    for stage in &params.stages {
        let mut inner = stage.down.apply(&x, 2);
        inner.data.iter_mut().for_each(|v| *v = gelu(*v));
        let inner = stage.conv.apply(&inner, 1);
        let mut skip = avg_pool2(&x);
        skip.data.iter_mut().zip(&inner.data).for_each(|(s, v)| *s += v);
        x = skip;
    }
    let mut out = ChannelStack::zeros(params.out_channels, x.height, x.width);
    let n = x.height * x.width;
    for o in 0..params.out_channels {
        for k in 0..n {
            let mut acc = params.proj_bias[o];
            for c in 0..params.hidden {
                acc += params.proj.at(o, c) * x.data[c * n + k];
            }
            out.data[o * n + k] = acc;
        }
    }
    Ok(out)
}
