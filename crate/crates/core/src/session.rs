//! Buffered multi-round editing: a frame buffer and an operation buffer, a
//! history truncated to the newest `N` pairs, and a pluggable generator.

use image::RgbaImage;
use ndarray::Array2;

use crate::assets::AssetStore;
use crate::attention::{context_self_attention, operation_self_attention, AttentionParams};
use crate::conditioning::{assemble_frame_input, assemble_operation_tokens, frame_encode, EncoderParams, FrameEncoderParams};
use crate::raster::{resize_to, Mask};
use crate::scene::{apply_operation, footprint, render, Canvas, NormBox, Observation, OperationCommand, OperationRecord, SceneError, SceneState};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("max history must be at least 1, got {0}")]
    InvalidN(usize),
    #[error("illegal command: {0}")]
    IllegalCommand(#[from] SceneError),
    #[error("generator failure: {0}")]
    GeneratorFailure(String),
}

impl SessionError {
    /// Error name for wire responses; illegal commands report the
    /// underlying scene error.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::InvalidN(_) => "InvalidN",
            SessionError::IllegalCommand(e) => e.code(),
            SessionError::GeneratorFailure(_) => "GeneratorFailure",
        }
    }
}

/// Observation/operation pairs `(x_i, o_i)`; `o_i` takes `x_i` to `x_{i+1}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditHistory {
    pub frames: Vec<Observation>,
    pub records: Vec<OperationRecord>,
}

impl EditHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Keeps the newest `n` pairs.
pub fn truncate_history(history: &EditHistory, n: usize) -> EditHistory {
    let drop = history.len().saturating_sub(n);
    EditHistory {
        frames: history.frames[drop..].to_vec(),
        records: history.records[drop..].to_vec(),
    }
}

/// Everything a generator may look at to produce the next frame.
pub struct GenerationRequest<'a> {
    pub history: &'a EditHistory,
    /// Canvas-sized target mask; all zero when the region is omitted.
    pub target_mask: &'a Mask,
    pub seed: u64,
    pub canvas: Canvas,
    /// Ground-truth state after the operation, when the session tracks one.
    pub scene: Option<&'a SceneState>,
    pub assets: &'a AssetStore,
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Observation, SessionError>;
}

/// Renders the ground-truth state directly.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleGenerator;

impl Generator for OracleGenerator {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Observation, SessionError> {
        let scene = req
            .scene
            .ok_or_else(|| SessionError::GeneratorFailure("oracle generator needs a scene state".into()))?;
        render(scene, req.assets).map_err(|e| SessionError::GeneratorFailure(e.to_string()))
    }
}

/// Runs the conditioning and attention kernels on downsampled features,
/// then returns the oracle frame. Exercises the full data path without a
/// trained network.
#[derive(Clone, Debug)]
pub struct NetworkStubGenerator {
    pub encoder: EncoderParams,
    pub attention: AttentionParams,
    /// Token grid side; frames are reduced to `4 * grid` before encoding.
    pub grid: usize,
    pub seed: u64,
}

impl NetworkStubGenerator {
    pub const MODEL_DIM: usize = 16;

    pub fn new(seed: u64) -> Self {
        let encoder = EncoderParams::new(crate::conditioning::DEFAULT_BANDS, 8, seed);
        let mut attention = AttentionParams::new(Self::MODEL_DIM, encoder.token_dim(), seed.wrapping_add(1));
        attention.gamma = 0.5;
        attention.lambda = 0.5;
        NetworkStubGenerator {
            encoder,
            attention,
            grid: 8,
            seed,
        }
    }

    /// Visual tokens of a frame: 4x4 average-pooled RGBA cells lifted to the
    /// model dim, plus the frame-encoder output.
    fn visual_tokens(&self, small: &RgbaImage, encoded: &crate::conditioning::ChannelStack) -> Array2<f64> {
        let g = self.grid;
        let d = Self::MODEL_DIM;
        Array2::from_shape_fn((g * g, d), |(t, k)| {
            let (gy, gx) = (t / g, t % g);
            let mut acc = 0.0;
            for y in 4 * gy..4 * gy + 4 {
                for x in 4 * gx..4 * gx + 4 {
                    acc += small.get_pixel(x as u32, y as u32).0[k % 4] as f64 / 255.0;
                }
            }
            acc / 16.0 * (1.0 + k as f64 / d as f64) + encoded.data[k * g * g + t]
        })
    }

    fn run(&self, req: &GenerationRequest<'_>) -> Result<(), String> {
        let g = self.grid;
        let side = 4 * g as u32;
        let cond = assemble_operation_tokens(&req.history.records, req.canvas, &self.encoder).map_err(|e| e.to_string())?;
        let cond = Array2::from_shape_vec((cond.tokens, cond.channels), cond.data).map_err(|e| e.to_string())?;

        let small: Vec<RgbaImage> = req.history.frames.iter().map(|f| resize_to(&f.image, side, side)).collect();
        let small_mask = req.target_mask.resample(side as usize, side as usize);
        let stack = assemble_frame_input(&small, &small_mask).map_err(|e| e.to_string())?;
        let fe = FrameEncoderParams::new(stack.channels, 8, Self::MODEL_DIM, 2, self.seed ^ req.seed);
        let encoded = frame_encode(&stack, &fe, (g, g)).map_err(|e| e.to_string())?;

        let last = small.last().ok_or("empty history")?;
        let prev = small.len().checked_sub(2).map_or(last, |i| &small[i]);
        let v_r = self.visual_tokens(last, &encoded);
        let v_prev = self.visual_tokens(prev, &encoded);

        let m_tgt = req.target_mask.resample(g, g);
        let src = req.history.records.last().ok_or("empty history")?.source_bbox;
        let m_prev = Mask::from_box(&src, g, g);
        let ctx = context_self_attention(&v_r, &v_prev, &m_tgt, &m_prev, &m_tgt, &self.attention).map_err(|e| e.to_string())?;
        let out = operation_self_attention(&ctx, &cond, &self.attention, 1.0).map_err(|e| e.to_string())?;
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err("non-finite features".into())
        }
    }
}

impl Generator for NetworkStubGenerator {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Observation, SessionError> {
        self.run(req).map_err(SessionError::GeneratorFailure)?;
        OracleGenerator.generate(req)
    }
}

/// Frame buffer `B_f`, operation buffer `B_o`, and the hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionBuffers {
    frames: Vec<Observation>,
    records: Vec<OperationRecord>,
    max_history: usize,
    canvas: Canvas,
    state: Option<SceneState>,
}

/// What a session starts from.
pub enum SessionStart {
    Observation(Observation),
    State(SceneState),
}

pub fn create_session(start: SessionStart, assets: &AssetStore, max_history: usize) -> Result<SessionBuffers, SessionError> {
    if max_history == 0 {
        return Err(SessionError::InvalidN(0));
    }
    let (x0, state) = match start {
        SessionStart::Observation(x0) => (x0, None),
        SessionStart::State(s) => (render(&s, assets)?, Some(s)),
    };
    Ok(SessionBuffers {
        canvas: Canvas::new(x0.image.width(), x0.image.height()),
        frames: vec![x0],
        records: Vec::new(),
        max_history,
        state,
    })
}

impl SessionBuffers {
    pub fn frames(&self) -> &[Observation] {
        &self.frames
    }

    pub fn records(&self) -> &[OperationRecord] {
        &self.records
    }

    pub fn round(&self) -> usize {
        self.records.len()
    }

    pub fn max_history(&self) -> usize {
        self.max_history
    }

    pub fn state(&self) -> Option<&SceneState> {
        self.state.as_ref()
    }

    pub fn canvas(&self) -> Canvas {
        self.canvas
    }

    /// Runs one round. Buffers change only when the generator succeeds.
    pub fn submit_operation(
        &mut self,
        cmd: &OperationCommand,
        target_bbox: Option<NormBox>,
        generator: &dyn Generator,
        seed: u64,
        assets: &AssetStore,
    ) -> Result<&Observation, SessionError> {
        let latest = self.frames.last().expect("frame buffer starts non-empty");
        let ann = latest
            .annotation(&cmd.target_instance_id)
            .ok_or_else(|| SceneError::UnknownInstance(cmd.target_instance_id.clone()))?;
        if ann.bbox_px.is_empty() {
            return Err(SceneError::DegenerateFootprint(cmd.target_instance_id.clone()).into());
        }
        let source_bbox = ann.bbox_px.normalize(self.canvas);

        let next = match &self.state {
            Some(s) => Some(apply_operation(s, cmd, assets)?),
            None => None,
        };
        let target_bbox = match (target_bbox, &next) {
            (Some(b), _) => Some(b),
            (None, Some(s)) => Some(footprint(s, assets, &cmd.target_instance_id)?.normalize(self.canvas)),
            (None, None) => None,
        };
        let record = OperationRecord {
            command: cmd.clone(),
            source_centroid: source_bbox.center(),
            source_bbox,
            target_bbox,
            round_index: self.round() + 1,
        };

        let mut records = self.records.clone();
        records.push(record.clone());
        let full = EditHistory {
            frames: self.frames.clone(),
            records,
        };
        let history = truncate_history(&full, self.max_history);
        assert!(history.len() <= self.max_history, "history exceeds the buffer bound");

        let (h, w) = (self.canvas.height as usize, self.canvas.width as usize);
        let mask = target_bbox.map_or_else(|| Mask::zeros(h, w), |b| Mask::from_box(&b, h, w));
        let frame = generator.generate(&GenerationRequest {
            history: &history,
            target_mask: &mask,
            seed,
            canvas: self.canvas,
            scene: next.as_ref(),
            assets,
        })?;
        if frame.image.dimensions() != (self.canvas.width, self.canvas.height) {
            return Err(SessionError::GeneratorFailure("generated frame has the wrong size".into()));
        }

        self.records.push(record);
        self.frames.push(frame);
        if next.is_some() {
            self.state = next;
        }
        Ok(self.frames.last().expect("just pushed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::AssetStore;
    use crate::scene::{Domain, ObjectInstance, Operation};

    fn fixture() -> (AssetStore, SceneState) {
        let assets = AssetStore::demo(1, 64);
        let state = SceneState {
            domain: Domain::Real,
            background_id: "bg_00".into(),
            canvas: Canvas::square(64),
            objects: vec![
                ObjectInstance::layer("a", "obj_00", [20.0, 20.0], 100.0, 1.0),
                ObjectInstance::layer("b", "obj_01", [40.0, 40.0], 150.0, 1.0),
            ],
            camera: None,
            rng_seed: 0,
        };
        (assets, state)
    }

    fn history(n: usize) -> EditHistory {
        let (assets, state) = fixture();
        let x = render(&state, &assets).unwrap();
        let rec = |i| OperationRecord {
            command: OperationCommand::new("a", Operation::Scale(1.0)),
            source_centroid: [0.0, 0.0],
            source_bbox: NormBox::new(0.0, 0.0, 0.0, 0.0),
            target_bbox: None,
            round_index: i,
        };
        EditHistory {
            frames: vec![x; n],
            records: (0..n).map(rec).collect(),
        }
    }

    #[test]
    fn truncation_keeps_newest() {
        let h = history(5);
        let t = truncate_history(&h, 3);
        assert_eq!(t.records.iter().map(|r| r.round_index).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(truncate_history(&history(3), 3), history(3));
        assert_eq!(truncate_history(&history(1), 8), history(1));
    }

    #[test]
    fn create_and_grow() {
        let (assets, state) = fixture();
        assert_eq!(
            create_session(SessionStart::State(state.clone()), &assets, 0).unwrap_err(),
            SessionError::InvalidN(0)
        );
        let mut s = create_session(SessionStart::State(state), &assets, 2).unwrap();
        assert_eq!((s.frames().len(), s.records().len()), (1, 0));
        for i in 0..6 {
            let cmd = OperationCommand::new("a", Operation::TranslateImage { dx: 1.0, dy: 0.0, dd: 0.0 });
            s.submit_operation(&cmd, None, &OracleGenerator, i, &assets).unwrap();
        }
        assert_eq!(s.frames().len(), 7);
        assert_eq!(s.round(), 6);
    }

    #[test]
    fn failed_command_leaves_buffers_alone() {
        let (assets, state) = fixture();
        let mut s = create_session(SessionStart::State(state), &assets, 4).unwrap();
        let before = s.clone();
        let bad = OperationCommand::new("a", Operation::Rotate { axis: crate::scene::Axis::X, degrees: 5.0 });
        let err = s.submit_operation(&bad, None, &OracleGenerator, 0, &assets).unwrap_err();
        assert_eq!(err.code(), "IllegalKindForDomain");
        let unknown = OperationCommand::new("zz", Operation::Scale(1.0));
        assert_eq!(s.submit_operation(&unknown, None, &OracleGenerator, 0, &assets).unwrap_err().code(), "UnknownInstance");
        assert_eq!(s, before);
    }

    #[test]
    fn oracle_needs_state() {
        let (assets, state) = fixture();
        let x0 = render(&state, &assets).unwrap();
        let mut s = create_session(SessionStart::Observation(x0), &assets, 4).unwrap();
        let cmd = OperationCommand::new("a", Operation::Scale(1.1));
        let err = s.submit_operation(&cmd, None, &OracleGenerator, 0, &assets).unwrap_err();
        assert!(matches!(err, SessionError::GeneratorFailure(_)));
        assert_eq!(s.frames().len(), 1);
    }

    #[test]
    fn network_stub_matches_oracle_frames() {
        let (assets, state) = fixture();
        let mut a = create_session(SessionStart::State(state.clone()), &assets, 3).unwrap();
        let mut b = create_session(SessionStart::State(state), &assets, 3).unwrap();
        let stub = NetworkStubGenerator::new(4);
        for (i, op) in [Operation::Scale(1.5), Operation::TranslateImage { dx: -5.0, dy: 3.0, dd: 10.0 }].into_iter().enumerate() {
            let cmd = OperationCommand::new("b", op);
            let x = a.submit_operation(&cmd, None, &stub, i as u64, &assets).unwrap().clone();
            let y = b.submit_operation(&cmd, None, &OracleGenerator, i as u64, &assets).unwrap();
            assert_eq!(&x, y);
        }
    }
}
