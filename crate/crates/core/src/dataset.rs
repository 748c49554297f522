//! On-disk dataset format: per-sequence frame PNGs plus an annotation
//! manifest, a top-level index, replay validation, and parallel generation.
//!
//! ```text
//! <root>/manifest.json
//! <root>/assets/...                 asset store used for generation
//! <root>/<sequence_id>/annotations.json
//! <root>/<sequence_id>/frames/000.png ...
//! <root>/<sequence_id>/script.json  planning domain only
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assets::{AssetError, AssetStore};
use crate::planner::{emit_scene_script, replay_script, Camera, SceneScript};
use crate::raster::{decode_png, encode_png};
use crate::sampler::{generate_sequence, SamplerConfig, SamplerError, Sequence};
use crate::scene::{
    apply_operation, build_record, render, validate_state, Annotation, Canvas, Domain, NormBox, ObjectInstance,
    Observation, Operation, OperationCommand, OperationRecord, SceneError, SceneState,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SCRIPT_FILE: &str = "script.json";
pub const FRAMES_DIR: &str = "frames";
pub const ASSETS_DIR: &str = "assets";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt manifest {path}: {message}")]
    CorruptManifest { path: String, message: String },
    #[error("missing frame {0}")]
    MissingFrame(String),
    #[error("frame {path} does not decode: {message}")]
    CorruptFrame { path: String, message: String },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Assets(#[from] AssetError),
}

impl DatasetError {
    pub fn code(&self) -> &'static str {
        match self {
            DatasetError::IoFailure { .. } => "IoFailure",
            DatasetError::CorruptManifest { .. } => "CorruptManifest",
            DatasetError::MissingFrame(_) => "MissingFrame",
            DatasetError::CorruptFrame { .. } => "FrameIntegrity",
            DatasetError::SchemaViolation(_) => "SchemaViolation",
            DatasetError::Scene(e) => e.code(),
            DatasetError::Sampler(_) => "SamplerError",
            DatasetError::Assets(_) => "AssetError",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

/// Pretty JSON with lexicographically sorted keys.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("dataset types are plain data");
    let mut s = serde_json::to_string_pretty(&v).expect("plain data");
    s.push('\n');
    s
}

/// Hex SHA-256 of the compact canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config is plain data");
    hex::encode(Sha256::digest(serde_json::to_string(&v).expect("plain data").as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundEntry {
    pub round_index: usize,
    pub target_instance_id: String,
    pub op: Operation,
    pub source_centroid: [f64; 2],
    pub source_bbox: NormBox,
    pub target_bbox: Option<NormBox>,
    /// Every instance after this round.
    pub objects: Vec<ObjectInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub schema_version: u32,
    pub sequence_id: String,
    pub domain: Domain,
    pub seed: u64,
    /// Number of rounds actually simulated.
    pub seq_len: usize,
    pub truncated: bool,
    pub canvas: Canvas,
    pub background_id: String,
    pub camera: Option<Camera>,
    pub initial_objects: Vec<ObjectInstance>,
    pub rounds: Vec<RoundEntry>,
    pub frames: Vec<String>,
    /// Per-frame annotations, aligned with `frames`.
    pub annotations: Vec<Vec<Annotation>>,
    pub config_hash: String,
}

impl SequenceManifest {
    pub fn from_sequence(seq: &Sequence, id: &str, config_hash: &str) -> Self {
        let first = &seq.states[0];
        let width = frame_name_width(seq.observations.len());
        SequenceManifest {
            schema_version: SCHEMA_VERSION,
            sequence_id: id.to_string(),
            domain: first.domain,
            seed: seq.seed,
            seq_len: seq.records.len(),
            truncated: seq.truncated,
            canvas: first.canvas,
            background_id: first.background_id.clone(),
            camera: first.camera,
            initial_objects: first.objects.clone(),
            rounds: seq
                .records
                .iter()
                .zip(&seq.states[1..])
                .map(|(r, s)| RoundEntry {
                    round_index: r.round_index,
                    target_instance_id: r.command.target_instance_id.clone(),
                    op: r.command.op,
                    source_centroid: r.source_centroid,
                    source_bbox: r.source_bbox,
                    target_bbox: r.target_bbox,
                    objects: s.objects.clone(),
                })
                .collect(),
            frames: (0..seq.observations.len()).map(|i| frame_name(i, width)).collect(),
            annotations: seq.observations.iter().map(|o| o.annotations.clone()).collect(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn initial_state(&self) -> SceneState {
        SceneState {
            domain: self.domain,
            background_id: self.background_id.clone(),
            canvas: self.canvas,
            objects: self.initial_objects.clone(),
            camera: self.camera,
            rng_seed: self.seed,
        }
    }

    pub fn states(&self) -> Vec<SceneState> {
        let first = self.initial_state();
        let mut out = vec![first.clone()];
        out.extend(self.rounds.iter().map(|r| SceneState {
            objects: r.objects.clone(),
            ..first.clone()
        }));
        out
    }

    pub fn records(&self) -> Vec<OperationRecord> {
        self.rounds
            .iter()
            .map(|r| OperationRecord {
                command: OperationCommand::new(r.target_instance_id.clone(), r.op),
                source_centroid: r.source_centroid,
                source_bbox: r.source_bbox,
                target_bbox: r.target_bbox,
                round_index: r.round_index,
            })
            .collect()
    }

    fn check_shape(&self) -> Result<(), DatasetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaViolation(format!(
                "schema_version {} is not {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.frames.len() != self.seq_len + 1 || self.rounds.len() != self.seq_len || self.annotations.len() != self.frames.len() {
            return Err(DatasetError::SchemaViolation(format!(
                "{} frames, {} rounds, {} annotation lists for seq_len {}",
                self.frames.len(),
                self.rounds.len(),
                self.annotations.len(),
                self.seq_len
            )));
        }
        for (k, r) in self.rounds.iter().enumerate() {
            if r.round_index != k + 1 {
                return Err(DatasetError::SchemaViolation(format!("round {} has index {}", k + 1, r.round_index)));
            }
        }
        Ok(())
    }
}

fn frame_name_width(frames: usize) -> usize {
    (frames.saturating_sub(1)).to_string().len().max(3)
}

fn frame_name(i: usize, width: usize) -> String {
    format!("{FRAMES_DIR}/{i:0width$}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub sequence_id: String,
    pub domain: Domain,
    pub frames: usize,
    pub truncated: bool,
}

/// Top-level index of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub sequences: Vec<DatasetEntry>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::CorruptManifest {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes one sequence directory (frames, annotations, and a script for
/// planning-domain sequences) without touching the top-level index.
pub fn write_sequence_dir(
    seq: &Sequence,
    root: &Path,
    id: &str,
    config_hash: &str,
    assets: &AssetStore,
) -> Result<DatasetEntry, DatasetError> {
    let dir = root.join(id);
    let frames_dir = dir.join(FRAMES_DIR);
    if frames_dir.exists() {
        fs::remove_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    }
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let manifest = SequenceManifest::from_sequence(seq, id, config_hash);
    for (name, obs) in manifest.frames.iter().zip(&seq.observations) {
        write(&dir.join(name), encode_png(&obs.image))?;
    }
    let script_path = dir.join(SCRIPT_FILE);
    if manifest.domain == Domain::Syn {
        let script = emit_scene_script(&seq.states, &seq.commands(), assets)?;
        write(&script_path, script.to_json() + "\n")?;
    } else if script_path.exists() {
        fs::remove_file(&script_path).map_err(io_err(&script_path))?;
    }
    write(&dir.join(ANNOTATIONS_FILE), canonical_json(&manifest))?;
    Ok(DatasetEntry {
        sequence_id: id.to_string(),
        domain: manifest.domain,
        frames: manifest.frames.len(),
        truncated: manifest.truncated,
    })
}

/// Inserts or replaces entries in `<root>/manifest.json`.
pub fn update_dataset_manifest(root: &Path, config_hash: &str, entries: Vec<DatasetEntry>) -> Result<PathBuf, DatasetError> {
    let path = root.join(MANIFEST_FILE);
    let mut manifest = if path.exists() {
        read_json::<DatasetManifest>(&path)?
    } else {
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            sequences: Vec::new(),
        }
    };
    for e in entries {
        manifest.sequences.retain(|s| s.sequence_id != e.sequence_id);
        manifest.sequences.push(e);
    }
    manifest.sequences.sort_by(|a, b| a.sequence_id.cmp(&b.sequence_id));
    manifest.config_hash = config_hash.to_string();
    write(&path, canonical_json(&manifest))?;
    Ok(path)
}

/// Exports one sequence and registers it in the top-level index. Returns
/// the sequence's annotation manifest path.
pub fn export_sequence(
    seq: &Sequence,
    root: &Path,
    id: &str,
    config_hash: &str,
    assets: &AssetStore,
) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let entry = write_sequence_dir(seq, root, id, config_hash, assets)?;
    update_dataset_manifest(root, config_hash, vec![entry])?;
    Ok(root.join(id).join(ANNOTATIONS_FILE))
}

/// Reads a sequence directory back. Structure only; see
/// [`validate_dataset`] for replay checks.
pub fn import_sequence(dir: &Path) -> Result<Sequence, DatasetError> {
    let manifest: SequenceManifest = read_json(&dir.join(ANNOTATIONS_FILE))?;
    manifest.check_shape()?;
    let mut observations = Vec::with_capacity(manifest.frames.len());
    for (name, annotations) in manifest.frames.iter().zip(&manifest.annotations) {
        let path = dir.join(name);
        if !path.exists() {
            return Err(DatasetError::MissingFrame(path.display().to_string()));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let image = decode_png(&bytes).map_err(|e| DatasetError::CorruptFrame {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if image.dimensions() != (manifest.canvas.width, manifest.canvas.height) {
            return Err(DatasetError::SchemaViolation(format!("{name} does not match the canvas size")));
        }
        observations.push(Observation {
            image,
            annotations: annotations.clone(),
        });
    }
    Ok(Sequence {
        seed: manifest.seed,
        states: manifest.states(),
        records: manifest.records(),
        observations,
        truncated: manifest.truncated,
    })
}

/// One problem found by validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub sequence: String,
    pub round: Option<usize>,
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub sequences_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Reporter<'a> {
    sequence: &'a str,
    out: Vec<Violation>,
}

impl Reporter<'_> {
    fn push(&mut self, round: Option<usize>, code: &str, message: impl Into<String>) {
        self.out.push(Violation {
            sequence: self.sequence.to_string(),
            round,
            code: code.to_string(),
            message: message.into(),
        });
    }
}

/// Replays one sequence directory against `assets`, comparing every state,
/// record, frame, and annotation.
pub fn validate_sequence(dir: &Path, assets: &AssetStore) -> Vec<Violation> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rep = Reporter { sequence: &name, out: Vec::new() };
    let manifest: SequenceManifest = match read_json(&dir.join(ANNOTATIONS_FILE)) {
        Ok(m) => m,
        Err(e) => {
            rep.push(None, e.code(), e.to_string());
            return rep.out;
        }
    };
    if let Err(e) = manifest.check_shape() {
        rep.push(None, e.code(), e.to_string());
        return rep.out;
    }

    let mut frame_bytes: Vec<Option<Vec<u8>>> = Vec::with_capacity(manifest.frames.len());
    for (i, f) in manifest.frames.iter().enumerate() {
        let path = dir.join(f);
        match fs::read(&path) {
            Err(_) => {
                rep.push(Some(i), "MissingFrame", format!("{f} is missing"));
                frame_bytes.push(None);
            }
            Ok(bytes) => match decode_png(&bytes) {
                Ok(_) => frame_bytes.push(Some(bytes)),
                Err(e) => {
                    rep.push(Some(i), "FrameIntegrity", format!("{f}: {e}"));
                    frame_bytes.push(None);
                }
            },
        }
    }

    let check_frame = |rep: &mut Reporter, i: usize, state: &SceneState| match render(state, assets) {
        Err(e) => rep.push(Some(i), e.code(), e.to_string()),
        Ok(obs) => {
            if let Some(bytes) = &frame_bytes[i] {
                if encode_png(&obs.image) != *bytes {
                    rep.push(Some(i), "FrameMismatch", format!("{} differs from the replayed render", manifest.frames[i]));
                }
            }
            if obs.annotations != manifest.annotations[i] {
                rep.push(Some(i), "AnnotationMismatch", "annotations differ from the replayed render");
            }
        }
    };

    let mut state = manifest.initial_state();
    let initial_errors = validate_state(&state, assets);
    if !initial_errors.is_empty() {
        for e in initial_errors {
            rep.push(Some(0), e.code(), e.to_string());
        }
        return rep.out;
    }
    check_frame(&mut rep, 0, &state);
    let mut states = vec![state.clone()];

    for (k, round) in manifest.rounds.iter().enumerate() {
        let r = k + 1;
        let cmd = OperationCommand::new(round.target_instance_id.clone(), round.op);
        let next = match apply_operation(&state, &cmd, assets) {
            Ok(n) => n,
            Err(e) => {
                rep.push(Some(r), e.code(), e.to_string());
                return rep.out;
            }
        };
        if next.objects != round.objects {
            rep.push(Some(r), "SchemaViolation", "recorded objects do not follow from the operation");
            return rep.out;
        }
        match build_record(&state, &next, &cmd, assets, r, round.target_bbox.is_some()) {
            Ok(rec) => {
                if rec.source_centroid != round.source_centroid || rec.source_bbox != round.source_bbox || rec.target_bbox != round.target_bbox {
                    rep.push(Some(r), "SchemaViolation", "recorded regions do not match the replay");
                }
            }
            Err(e) => rep.push(Some(r), e.code(), e.to_string()),
        }
        check_frame(&mut rep, r, &next);
        states.push(next.clone());
        state = next;
    }

    if manifest.domain == Domain::Syn {
        let path = dir.join(SCRIPT_FILE);
        match read_json::<SceneScript>(&path) {
            Err(e) => rep.push(None, e.code(), e.to_string()),
            Ok(script) => match replay_script(&script, assets) {
                Ok(replayed) if replayed == states => {}
                Ok(_) => rep.push(None, "InconsistentSequence", "scene script replays to different states"),
                Err(e) => rep.push(None, e.code(), e.to_string()),
            },
        }
    }
    rep.out
}

/// Validates every sequence listed in `<root>/manifest.json` against the
/// assets in `<root>/assets`.
pub fn validate_dataset(root: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let dataset = |code: &str, message: String| Violation {
        sequence: String::new(),
        round: None,
        code: code.to_string(),
        message,
    };
    let manifest: DatasetManifest = match read_json(&root.join(MANIFEST_FILE)) {
        Ok(m) => m,
        Err(e) => {
            report.violations.push(dataset(e.code(), e.to_string()));
            return report;
        }
    };
    let assets = match AssetStore::load_dir(root.join(ASSETS_DIR)) {
        Ok(a) => a,
        Err(e) => {
            report.violations.push(dataset("AssetError", e.to_string()));
            return report;
        }
    };
    let found: Vec<Vec<Violation>> = manifest
        .sequences
        .par_iter()
        .map(|s| validate_sequence(&root.join(&s.sequence_id), &assets))
        .collect();
    report.sequences_checked = manifest.sequences.len();
    report.violations = found.into_iter().flatten().collect();
    report
}

/// Everything that determines a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub domain: Domain,
    pub canvas: Canvas,
    pub num_seqs: usize,
    pub base_seed: u64,
    pub sampler: SamplerConfig,
}

impl DatasetConfig {
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn sequence_id(i: usize) -> String {
        format!("seq_{i:05}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub sequences: usize,
    pub frames: usize,
    pub truncated: usize,
    pub config_hash: String,
}

/// Generates and exports `cfg.num_seqs` sequences in parallel; sequence `i`
/// uses seed `base_seed + i`.
pub fn generate_dataset(cfg: &DatasetConfig, assets: &AssetStore, root: &Path) -> Result<GenerationSummary, DatasetError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    assets.write_dir(root.join(ASSETS_DIR))?;
    let hash = cfg.hash();
    let entries = (0..cfg.num_seqs)
        .into_par_iter()
        .map(|i| {
            let seq = generate_sequence(cfg.domain, assets, cfg.canvas, &cfg.sampler, cfg.base_seed.wrapping_add(i as u64))?;
            write_sequence_dir(&seq, root, &DatasetConfig::sequence_id(i), &hash, assets)
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let summary = GenerationSummary {
        sequences: entries.len(),
        frames: entries.iter().map(|e| e.frames).sum(),
        truncated: entries.iter().filter(|e| e.truncated).count(),
        config_hash: hash.clone(),
    };
    update_dataset_manifest(root, &hash, entries)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(domain: Domain, n: usize) -> DatasetConfig {
        DatasetConfig {
            domain,
            canvas: Canvas::square(48),
            num_seqs: n,
            base_seed: 3,
            sampler: SamplerConfig {
                seq_len: 4,
                r_max: 4,
                ..SamplerConfig::default()
            },
        }
    }

    #[test]
    fn generate_validate_import() {
        let assets = AssetStore::demo(0, 48);
        for domain in [Domain::Real, Domain::Syn] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = small_cfg(domain, 2);
            let summary = generate_dataset(&cfg, &assets, dir.path()).unwrap();
            assert_eq!(summary.sequences, 2);
            let report = validate_dataset(dir.path());
            assert!(report.is_clean(), "{:?}", report.violations);
            let seq = import_sequence(&dir.path().join("seq_00000")).unwrap();
            let direct = generate_sequence(domain, &assets, cfg.canvas, &cfg.sampler, 3).unwrap();
            assert_eq!(seq, direct);
        }
    }

    #[test]
    fn export_is_idempotent_and_detects_damage() {
        let assets = AssetStore::demo(0, 48);
        let cfg = small_cfg(Domain::Real, 1);
        let seq = generate_sequence(cfg.domain, &assets, cfg.canvas, &cfg.sampler, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assets.write_dir(dir.path().join(ASSETS_DIR)).unwrap();
        let p = export_sequence(&seq, dir.path(), "s", "h", &assets).unwrap();
        let first = fs::read(&p).unwrap();
        export_sequence(&seq, dir.path(), "s", "h", &assets).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert!(validate_dataset(dir.path()).is_clean());

        // truncated PNG
        let f = dir.path().join("s/frames/002.png");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
        let report = validate_dataset(dir.path());
        assert_eq!(report.violations.len(), 1, "{:?}", report.violations);
        assert_eq!(report.violations[0].code, "FrameIntegrity");

        fs::remove_file(&f).unwrap();
        assert!(matches!(import_sequence(&dir.path().join("s")), Err(DatasetError::MissingFrame(_))));
    }

    #[test]
    fn config_hash_is_stable() {
        let a = small_cfg(Domain::Real, 2);
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), small_cfg(Domain::Real, 3).hash());
        assert_eq!(a.hash().len(), 64);
    }
}
