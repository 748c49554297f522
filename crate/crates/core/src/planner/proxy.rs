//! Z-buffered, flat-shaded box render of a planning-domain state. No
//! shadows, no textures; the ground patch is a two-tone checkerboard.

use image::{Rgba, RgbaImage};
use sha2::{Digest, Sha256};

use super::{BoxPose, Camera, Vec3, GROUND_EXTENT};
use crate::assets::AssetStore;
use crate::scene::{Annotation, Canvas, Observation, PixelBox, SceneError, SceneState};

/// Faces as corner indices (bit 0 -> +x, bit 1 -> +y, bit 2 -> +z) with the
/// local outward normal.
const FACES: [([usize; 4], Vec3); 6] = [
    ([0, 2, 6, 4], [-1.0, 0.0, 0.0]),
    ([1, 3, 7, 5], [1.0, 0.0, 0.0]),
    ([0, 1, 5, 4], [0.0, -1.0, 0.0]),
    ([2, 3, 7, 6], [0.0, 1.0, 0.0]),
    ([0, 1, 3, 2], [0.0, 0.0, -1.0]),
    ([4, 5, 7, 6], [0.0, 0.0, 1.0]),
];

const LIGHT: Vec3 = [0.3713906763541037, 0.9284766908852593, 0.0];

fn digest_color(tag: &str, key: &str) -> [u8; 3] {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(key.as_bytes());
    let d = h.finalize();
    [d[0], d[1], d[2]]
}

/// Sky and ground colors keyed on the background id.
pub fn background_palette(background_id: &str) -> ([u8; 3], [u8; 3], [u8; 3]) {
    let sky = digest_color("sky", background_id).map(|c| 150 + c % 100);
    let g = digest_color("ground", background_id).map(|c| 60 + c % 80);
    let g2 = g.map(|c| c + 30);
    (sky, g, g2)
}

fn object_color(asset_id: &str) -> [u8; 3] {
    digest_color("object", asset_id).map(|c| 40 + c % 200)
}

/// Per-pixel coverage of a set of boxes: nearest box index and view depth.
pub struct DepthBuffer {
    pub canvas: Canvas,
    pub ids: Vec<Option<usize>>,
    pub depth: Vec<f64>,
    pub shade: Vec<f64>,
}

impl DepthBuffer {
    fn new(canvas: Canvas) -> Self {
        let n = canvas.width as usize * canvas.height as usize;
        DepthBuffer {
            canvas,
            ids: vec![None; n],
            depth: vec![f64::INFINITY; n],
            shade: vec![0.0; n],
        }
    }

    /// Rasterizes one box. Triangles with a vertex at or before the near
    /// plane are dropped; legal states never have them.
    fn draw_box(&mut self, id: usize, pose: &BoxPose, camera: &Camera) {
        let corners = pose.corners();
        let projected = corners.map(|c| camera.project(c, self.canvas));
        let rot = super::rotation_matrix(pose.rotation_deg);
        for (quad, normal) in FACES {
            let n = super::mat_vec(&rot, normal);
            let shade = 0.35 + 0.65 * super::dot(n, LIGHT).max(0.0);
            for tri in [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]] {
                let v = tri.map(|i| projected[i]);
                if v.iter().any(|p| p.depth <= camera.near) {
                    continue;
                }
                self.draw_triangle(id, shade, [(v[0].px, v[0].py, v[0].depth), (v[1].px, v[1].py, v[1].depth), (v[2].px, v[2].py, v[2].depth)]);
            }
        }
    }

    fn draw_triangle(&mut self, id: usize, shade: f64, v: [(f64, f64, f64); 3]) {
        let w = self.canvas.width as i64;
        let h = self.canvas.height as i64;
        let area = (v[1].0 - v[0].0) * (v[2].1 - v[0].1) - (v[2].0 - v[0].0) * (v[1].1 - v[0].1);
        if area == 0.0 {
            return;
        }
        let min_x = v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let x0 = ((min_x - 0.5).ceil() as i64).max(0);
        let x1 = ((max_x - 0.5).floor() as i64).min(w - 1);
        let y0 = ((min_y - 0.5).ceil() as i64).max(0);
        let y1 = ((max_y - 0.5).floor() as i64).min(h - 1);
        let inv_z = v.map(|p| 1.0 / p.2);
        for y in y0..=y1 {
            let py = y as f64 + 0.5;
            for x in x0..=x1 {
                let px = x as f64 + 0.5;
                let e = |a: (f64, f64, f64), b: (f64, f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let b0 = e(v[1], v[2]) / area;
                let b1 = e(v[2], v[0]) / area;
                let b2 = e(v[0], v[1]) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                // 1/z is affine in screen space
                let depth = 1.0 / (b0 * inv_z[0] + b1 * inv_z[1] + b2 * inv_z[2]);
                let k = (y * w + x) as usize;
                if depth < self.depth[k] {
                    self.depth[k] = depth;
                    self.ids[k] = Some(id);
                    self.shade[k] = shade;
                }
            }
        }
    }

    fn footprint(&self, id: usize) -> PixelBox {
        let w = self.canvas.width as usize;
        let mut bbox = PixelBox::EMPTY;
        for (k, slot) in self.ids.iter().enumerate() {
            if *slot == Some(id) {
                bbox.include((k % w) as i64, (k / w) as i64);
            }
        }
        bbox
    }
}

fn camera_of(state: &SceneState) -> Result<Camera, SceneError> {
    state
        .camera
        .ok_or_else(|| SceneError::InvalidState("planning-domain state has no camera".into()))
}

/// Depth buffer of the given instance indices.
pub fn depth_buffer(state: &SceneState, assets: &AssetStore, which: &[usize]) -> Result<DepthBuffer, SceneError> {
    let camera = camera_of(state)?;
    let mut buf = DepthBuffer::new(state.canvas);
    for &i in which {
        let pose = BoxPose::of(&state.objects[i], assets)?;
        buf.draw_box(i, &pose, &camera);
    }
    Ok(buf)
}

/// Tight pixel box of instance `idx` rendered alone.
pub fn silhouette_box(state: &SceneState, assets: &AssetStore, idx: usize) -> Result<PixelBox, SceneError> {
    Ok(depth_buffer(state, assets, &[idx])?.footprint(idx))
}

fn background_pixel(camera: &Camera, canvas: Canvas, x: u32, y: u32, palette: &([u8; 3], [u8; 3], [u8; 3])) -> [u8; 3] {
    let (origin, dir) = camera.ray(x as f64 + 0.5, y as f64 + 0.5, canvas);
    if dir[1] < 0.0 {
        let t = -origin[1] / dir[1];
        let gx = origin[0] + t * dir[0];
        let gz = origin[2] + t * dir[2];
        let half = GROUND_EXTENT / 2.0;
        if gx.abs() <= half && gz.abs() <= half {
            let parity = (gx.floor() as i64 + gz.floor() as i64).rem_euclid(2);
            return if parity == 0 { palette.1 } else { palette.2 };
        }
    }
    palette.0
}

/// Renders the state and annotates every instance.
pub fn proxy_render(state: &SceneState, assets: &AssetStore) -> Result<Observation, SceneError> {
    let camera = camera_of(state)?;
    let all: Vec<usize> = (0..state.objects.len()).collect();
    let buf = depth_buffer(state, assets, &all)?;
    let palette = background_palette(&state.background_id);
    let colors: Vec<[u8; 3]> = state.objects.iter().map(|o| object_color(&o.asset_id)).collect();

    let mut image = RgbaImage::new(state.canvas.width, state.canvas.height);
    let w = state.canvas.width as usize;
    for (x, y, p) in image.enumerate_pixels_mut() {
        let k = y as usize * w + x as usize;
        let rgb = match buf.ids[k] {
            Some(i) => colors[i].map(|c| crate::raster::quantize(c as f64 * buf.shade[k])),
            None => background_pixel(&camera, state.canvas, x, y, &palette),
        };
        *p = Rgba([rgb[0], rgb[1], rgb[2], 255]);
    }

    let mut visible = vec![0usize; state.objects.len()];
    for id in buf.ids.iter().flatten() {
        visible[*id] += 1;
    }
    // rank by distance from the camera to the box center, farthest first
    let dist: Vec<f64> = state
        .objects
        .iter()
        .map(|o| {
            let c = BoxPose::of(o, assets)?.position;
            Ok(camera.project(c, state.canvas).depth)
        })
        .collect::<Result<_, SceneError>>()?;
    let mut order: Vec<usize> = all.clone();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut rank = vec![0usize; order.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let mut annotations = Vec::with_capacity(state.objects.len());
    for (i, inst) in state.objects.iter().enumerate() {
        let alone = depth_buffer(state, assets, &[i])?;
        let bbox = alone.footprint(i);
        let total = alone.ids.iter().filter(|s| s.is_some()).count();
        annotations.push(Annotation {
            instance_id: inst.instance_id.clone(),
            bbox_px: bbox,
            clipped_bbox_px: bbox.clip(state.canvas),
            centroid_px: bbox.center(),
            visible_fraction: if total == 0 { 0.0 } else { visible[i] as f64 / total as f64 },
            depth_rank: rank[i],
        });
    }
    Ok(Observation { image, annotations })
}
