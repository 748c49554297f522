//! Asset store: RGBA layers for the compositing domain and box extents for the
//! planning domain, indexed by an `assets.json` file.
//!
//! On disk a store is a directory holding `assets.json` (a list of
//! `{id, kind, tags, extent?}` entries) and one `<id>.png` per `layer2d`
//! asset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{decode_png, encode_png};

/// Tag marking a layer as a scene background rather than a foreground object.
pub const BACKGROUND_TAG: &str = "background";

pub const INDEX_FILE: &str = "assets.json";

#[derive(Debug, thiserror::Error)]
pub enum AssetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed asset index: {0}")]
    Index(#[from] serde_json::Error),
    #[error("cannot decode layer for asset `{id}`: {source}")]
    Decode {
        id: String,
        #[source]
        source: image::ImageError,
    },
    #[error("duplicate asset id `{0}`")]
    DuplicateId(String),
    #[error("asset `{0}` has no opaque pixels")]
    DegenerateAsset(String),
    #[error("asset `{0}` has a non-positive or missing extent")]
    InvalidExtent(String),
    #[error("asset `{0}` is a layer2d asset without a raster")]
    MissingLayer(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetKind {
    Layer2d,
    Box3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    #[default]
    Straight,
    Premultiplied,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectAsset {
    pub id: String,
    pub kind: AssetKind,
    /// Always stored with straight alpha; premultiplied inputs are converted
    /// when the asset is created.
    pub layer: Option<Arc<RgbaImage>>,
    /// `(w, h, depth)` in scene units, `box3d` only.
    pub extent: Option<[f64; 3]>,
    pub tags: Vec<String>,
}

impl ObjectAsset {
    pub fn layer(
        id: impl Into<String>,
        raster: RgbaImage,
        alpha: AlphaMode,
        tags: Vec<String>,
    ) -> Result<Self, AssetError> {
        let id = id.into();
        let raster = match alpha {
            AlphaMode::Straight => raster,
            AlphaMode::Premultiplied => unpremultiply(raster),
        };
        if raster.width() == 0 || raster.height() == 0 || raster.pixels().all(|p| p[3] == 0) {
            return Err(AssetError::DegenerateAsset(id));
        }
        Ok(ObjectAsset {
            id,
            kind: AssetKind::Layer2d,
            layer: Some(Arc::new(raster)),
            extent: None,
            tags,
        })
    }

    pub fn cuboid(id: impl Into<String>, extent: [f64; 3], tags: Vec<String>) -> Result<Self, AssetError> {
        let id = id.into();
        if !extent.iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(AssetError::InvalidExtent(id));
        }
        Ok(ObjectAsset {
            id,
            kind: AssetKind::Box3d,
            layer: None,
            extent: Some(extent),
            tags,
        })
    }

    pub fn is_background(&self) -> bool {
        self.tags.iter().any(|t| t == BACKGROUND_TAG)
    }

    pub fn index_entry(&self) -> AssetIndexEntry {
        AssetIndexEntry {
            id: self.id.clone(),
            kind: self.kind,
            tags: self.tags.clone(),
            extent: self.extent,
        }
    }
}

fn unpremultiply(mut img: RgbaImage) -> RgbaImage {
    for p in img.pixels_mut() {
        let a = p[3] as f64;
        if a > 0.0 {
            for c in 0..3 {
                p[c] = crate::raster::quantize(p[c] as f64 * 255.0 / a);
            }
        }
    }
    img
}

/// One entry of `assets.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetIndexEntry {
    pub id: String,
    pub kind: AssetKind,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Default)]
pub struct AssetStore {
    assets: BTreeMap<String, ObjectAsset>,
}

impl AssetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, asset: ObjectAsset) -> Result<(), AssetError> {
        if self.assets.contains_key(&asset.id) {
            return Err(AssetError::DuplicateId(asset.id));
        }
        if asset.kind == AssetKind::Layer2d && asset.layer.is_none() {
            return Err(AssetError::MissingLayer(asset.id));
        }
        self.assets.insert(asset.id.clone(), asset);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ObjectAsset> {
        self.assets.get(id)
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ObjectAsset> {
        self.assets.values()
    }

    /// Background layers, in id order.
    pub fn backgrounds(&self) -> Vec<&ObjectAsset> {
        self.iter()
            .filter(|a| a.kind == AssetKind::Layer2d && a.is_background())
            .collect()
    }

    /// Foreground objects of `kind`, in id order.
    pub fn objects(&self, kind: AssetKind) -> Vec<&ObjectAsset> {
        self.iter()
            .filter(|a| a.kind == kind && !a.is_background())
            .collect()
    }

    pub fn index(&self) -> Vec<AssetIndexEntry> {
        self.iter().map(ObjectAsset::index_entry).collect()
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, AssetError> {
        let dir = dir.as_ref();
        let index_path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&index_path).map_err(|source| AssetError::Io {
            path: index_path.clone(),
            source,
        })?;
        let entries: Vec<AssetIndexEntry> = serde_json::from_str(&text)?;
        let mut store = AssetStore::new();
        for entry in entries {
            let asset = match entry.kind {
                AssetKind::Layer2d => {
                    let path = dir.join(format!("{}.png", entry.id));
                    let bytes = fs::read(&path).map_err(|source| AssetError::Io { path, source })?;
                    let raster = decode_png(&bytes).map_err(|source| AssetError::Decode {
                        id: entry.id.clone(),
                        source,
                    })?;
                    ObjectAsset::layer(entry.id, raster, AlphaMode::Straight, entry.tags)?
                }
                AssetKind::Box3d => {
                    let extent = entry
                        .extent
                        .ok_or_else(|| AssetError::InvalidExtent(entry.id.clone()))?;
                    ObjectAsset::cuboid(entry.id, extent, entry.tags)?
                }
            };
            store.insert(asset)?;
        }
        Ok(store)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), AssetError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| AssetError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for asset in self.iter() {
            if let Some(layer) = &asset.layer {
                let path = dir.join(format!("{}.png", asset.id));
                fs::write(&path, encode_png(layer)).map_err(io(&path))?;
            }
        }
        let index_path = dir.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(&self.index())?;
        fs::write(&index_path, text).map_err(io(&index_path))?;
        Ok(())
    }

    /// A small procedurally generated store: gradient backgrounds, soft-edged
    /// shape layers, and boxes of assorted extents.
    pub fn demo(seed: u64, background_size: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = AssetStore::new();
        for i in 0..3 {
            let bg = demo_background(&mut rng, background_size);
            store
                .insert(
                    ObjectAsset::layer(format!("bg_{i:02}"), bg, AlphaMode::Straight, vec![BACKGROUND_TAG.into()])
                        .expect("demo background is opaque"),
                )
                .expect("unique id");
        }
        let shapes = [Shape::Ellipse, Shape::Rect, Shape::Triangle, Shape::Ring, Shape::Ellipse, Shape::Rect];
        for (i, shape) in shapes.iter().enumerate() {
            let w = rng.random_range(48..=128u32);
            let h = rng.random_range(48..=128u32);
            let layer = demo_layer(&mut rng, *shape, w, h);
            store
                .insert(
                    ObjectAsset::layer(format!("obj_{i:02}"), layer, AlphaMode::Straight, vec![shape.tag().into()])
                        .expect("demo shapes have opaque pixels"),
                )
                .expect("unique id");
        }
        for i in 0..6 {
            let extent = [
                rng.random_range(0.4..1.6),
                rng.random_range(0.4..1.6),
                rng.random_range(0.4..1.6),
            ];
            store
                .insert(ObjectAsset::cuboid(format!("box_{i:02}"), extent, vec!["box".into()]).expect("positive"))
                .expect("unique id");
        }
        store
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse,
    Rect,
    Triangle,
    Ring,
}

impl Shape {
    fn tag(self) -> &'static str {
        match self {
            Shape::Ellipse => "ellipse",
            Shape::Rect => "rect",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
        }
    }

    /// Signed coverage in normalized coordinates `[-1, 1]^2`: positive inside.
    fn inside(self, x: f64, y: f64) -> f64 {
        match self {
            Shape::Ellipse => 1.0 - (x * x + y * y).sqrt(),
            Shape::Rect => 0.9 - x.abs().max(y.abs()),
            // apex at the top, base along the bottom edge
            Shape::Triangle => (0.9 - y).min((y + 0.9) * 0.5 - x.abs()),
            Shape::Ring => {
                let r = (x * x + y * y).sqrt();
                0.3 - (r - 0.65).abs()
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(30.0..230.0),
        rng.random_range(30.0..230.0),
        rng.random_range(30.0..230.0),
    ]
}

fn demo_layer(rng: &mut ChaCha8Rng, shape: Shape, w: u32, h: u32) -> RgbaImage {
    let base = random_color(rng);
    let accent = random_color(rng);
    let stripes = rng.random_range(2.0..6.0);
    RgbaImage::from_fn(w, h, |px, py| {
        let x = (px as f64 + 0.5) / w as f64 * 2.0 - 1.0;
        let y = (py as f64 + 0.5) / h as f64 * 2.0 - 1.0;
        let edge = 2.0 / w.min(h) as f64;
        let coverage = (shape.inside(x, y) / edge + 0.5).clamp(0.0, 1.0);
        let t = 0.5 + 0.5 * (stripes * std::f64::consts::PI * (x + 0.5 * y)).sin();
        let mut c = [0u8; 4];
        for k in 0..3 {
            c[k] = (base[k] * (1.0 - t) + accent[k] * t).round() as u8;
        }
        c[3] = (coverage * 255.0).round() as u8;
        Rgba(c)
    })
}

fn demo_background(rng: &mut ChaCha8Rng, size: u32) -> RgbaImage {
    let top = random_color(rng);
    let bottom = random_color(rng);
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                rng.random_range(0.05..0.25),
                random_color(rng),
            )
        })
        .collect();
    RgbaImage::from_fn(size, size, |px, py| {
        let u = (px as f64 + 0.5) / size as f64;
        let v = (py as f64 + 0.5) / size as f64;
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = top[k] * (1.0 - v) + bottom[k] * v;
        }
        for (center, radius, color) in &blobs {
            let d2 = (u - center[0]).powi(2) + (v - center[1]).powi(2);
            let w = (-d2 / (radius * radius)).exp() * 0.6;
            for k in 0..3 {
                c[k] = c[k] * (1.0 - w) + color[k] * w;
            }
        }
        Rgba([c[0].round() as u8, c[1].round() as u8, c[2].round() as u8, 255])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_transparent_layer_is_rejected() {
        let img = RgbaImage::from_pixel(4, 4, Rgba([9, 9, 9, 0]));
        let err = ObjectAsset::layer("ghost", img, AlphaMode::Straight, vec![]).unwrap_err();
        assert!(matches!(err, AssetError::DegenerateAsset(id) if id == "ghost"));
    }

    #[test]
    fn non_positive_extent_is_rejected() {
        assert!(ObjectAsset::cuboid("flat", [1.0, 0.0, 1.0], vec![]).is_err());
        assert!(ObjectAsset::cuboid("neg", [1.0, 1.0, -2.0], vec![]).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut store = AssetStore::new();
        store.insert(ObjectAsset::cuboid("a", [1.0; 3], vec![]).unwrap()).unwrap();
        let err = store.insert(ObjectAsset::cuboid("a", [2.0; 3], vec![]).unwrap()).unwrap_err();
        assert!(matches!(err, AssetError::DuplicateId(_)));
    }

    #[test]
    fn premultiplied_input_is_converted() {
        let img = RgbaImage::from_pixel(1, 1, Rgba([50, 100, 0, 128]));
        let asset = ObjectAsset::layer("p", img, AlphaMode::Premultiplied, vec![]).unwrap();
        let px = asset.layer.unwrap().get_pixel(0, 0).0;
        assert_eq!(px, [100, 199, 0, 128]);
    }

    #[test]
    fn demo_store_round_trips_through_disk() {
        let store = AssetStore::demo(3, 64);
        let dir = tempfile::tempdir().unwrap();
        store.write_dir(dir.path()).unwrap();
        let loaded = AssetStore::load_dir(dir.path()).unwrap();
        assert_eq!(loaded.index(), store.index());
        for a in store.iter() {
            assert_eq!(loaded.get(&a.id).unwrap(), a);
        }
        assert_eq!(store.backgrounds().len(), 3);
        assert_eq!(store.objects(AssetKind::Layer2d).len(), 6);
        assert_eq!(store.objects(AssetKind::Box3d).len(), 6);
    }

    #[test]
    fn demo_store_is_deterministic() {
        let a = AssetStore::demo(11, 32);
        let b = AssetStore::demo(11, 32);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }
}
