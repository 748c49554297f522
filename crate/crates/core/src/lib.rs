//! Deterministic scene-editing engine: 2D layer compositing and 3D box
//! planning domains, rule-based sequence generation, conditioning and
//! attention kernels, buffered editing sessions, and dataset I/O.

pub mod assets;
pub mod attention;
pub mod conditioning;
pub mod dataset;
pub mod metrics;
pub mod planner;
pub mod raster;
pub mod render_real;
pub mod sampler;
pub mod scene;
pub mod session;
pub mod weights;

pub use assets::{AssetStore, ObjectAsset};
pub use scene::{
    apply_operation, render, Canvas, Domain, ObjectInstance, Observation, Operation, OperationCommand, OperationRecord,
    SceneError, SceneState,
};
