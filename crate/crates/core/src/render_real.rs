//! Observation map for the compositing domain: depth-dependent sizing and
//! painter's-order alpha compositing of RGBA layers over a background.

use image::RgbaImage;

use crate::assets::{AssetKind, AssetStore, ObjectAsset};
use crate::raster::{quantize, resize_bilinear, resize_to};
use crate::scene::{Annotation, Canvas, Domain, ObjectInstance, Observation, PixelBox, Placement, SceneError, SceneState};

/// Depth bounds and the unscaled size bounds (pixels) of the depth->size law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub shat_min: f64,
    pub shat_max: f64,
}

impl SizeConfig {
    pub const D_MIN: f64 = 10.0;
    pub const D_MAX: f64 = 200.0;

    /// Size bounds `l/20` and `l/4` for canvas shortest side `l`.
    pub fn for_canvas(canvas: Canvas) -> Self {
        Self::for_shortest_side(canvas.shortest_side())
    }

    pub fn for_shortest_side(l: f64) -> Self {
        SizeConfig {
            d_min: Self::D_MIN,
            d_max: Self::D_MAX,
            shat_min: l / 20.0,
            shat_max: l / 4.0,
        }
    }
}

/// Shortest side, in pixels, of an object at depth `depth` with scale factor
/// `scale`.
///
/// The size interpolates linearly from `s_max` at `d_min` down to `s_min` at
/// `d_max`, where both size bounds are the predefined ones multiplied by the
/// scale factor.
pub fn compute_object_size(depth: f64, scale: f64, cfg: &SizeConfig) -> Result<f64, SceneError> {
    if !(depth >= cfg.d_min && depth <= cfg.d_max) {
        return Err(SceneError::BoundViolation(format!(
            "depth {depth} outside [{}, {}]",
            cfg.d_min, cfg.d_max
        )));
    }
    if !(0.2..=4.0).contains(&scale) {
        return Err(SceneError::BoundViolation(format!("scale factor {scale} outside [0.2, 4]")));
    }
    let s_min = cfg.shat_min * scale;
    let s_max = cfg.shat_max * scale;
    Ok((depth - cfg.d_max) * (s_min - s_max) / (cfg.d_max - cfg.d_min) + s_min)
}

/// A resized layer positioned on the canvas plane.
#[derive(Clone, Debug)]
pub struct PlacedLayer {
    pub raster: RgbaImage,
    /// Top-left pixel of `raster` in canvas coordinates.
    pub origin: (i64, i64),
    /// The full layer rectangle, possibly off-canvas.
    pub rect: PixelBox,
    pub clipped_rect: Option<PixelBox>,
    /// Tight box of pixels with nonzero alpha.
    pub footprint: PixelBox,
    pub opaque_pixels: usize,
}

/// Resizes the asset so its shortest side equals the depth-derived size and
/// centers it on the instance's center, rounding the origin to the nearest
/// pixel.
pub fn rasterize_layer(asset: &ObjectAsset, instance: &ObjectInstance, canvas: Canvas) -> Result<PlacedLayer, SceneError> {
    let (Some(src), Placement::Layer { center_px, depth }) = (&asset.layer, &instance.placement) else {
        return Err(SceneError::InvalidState(format!(
            "instance `{}` is not a layer instance",
            instance.instance_id
        )));
    };
    let size = compute_object_size(*depth, instance.scale, &SizeConfig::for_canvas(canvas))?;
    if size < 1.0 {
        return Err(SceneError::SubpixelSize(size));
    }
    let (sw, sh) = src.dimensions();
    let k = size / sw.min(sh) as f64;
    let real_w = sw as f64 * k;
    let real_h = sh as f64 * k;
    let out_w = (real_w.round_ties_even() as u32).max(1);
    let out_h = (real_h.round_ties_even() as u32).max(1);
    let raster = resize_bilinear(src, k, k, out_w, out_h);

    let ox = (center_px[0] - real_w / 2.0).round_ties_even() as i64;
    let oy = (center_px[1] - real_h / 2.0).round_ties_even() as i64;
    let rect = PixelBox::new(ox, oy, ox + out_w as i64, oy + out_h as i64);

    let mut footprint = PixelBox::EMPTY;
    let mut opaque = 0;
    for (x, y, p) in raster.enumerate_pixels() {
        if p[3] > 0 {
            opaque += 1;
            footprint.include(ox + x as i64, oy + y as i64);
        }
    }
    Ok(PlacedLayer {
        raster,
        origin: (ox, oy),
        rect,
        clipped_rect: rect.clip(canvas),
        footprint,
        opaque_pixels: opaque,
    })
}

/// Back-to-front draw order: larger depth first, ties by insertion order so
/// a later-inserted instance lands on top.
pub fn draw_order(state: &SceneState) -> Vec<usize> {
    let mut order: Vec<usize> = (0..state.objects.len()).collect();
    order.sort_by(|&a, &b| depth_of(&state.objects[b]).total_cmp(&depth_of(&state.objects[a])));
    order
}

fn depth_of(inst: &ObjectInstance) -> f64 {
    match inst.placement {
        Placement::Layer { depth, .. } => depth,
        Placement::Box { .. } => 0.0,
    }
}

/// Straight-alpha source-over of `src` (8-bit) onto an accumulator pixel
/// holding color in `[0, 255]` and alpha in `[0, 1]`.
#[inline]
pub fn source_over(dst: &mut [f64; 4], src: [u8; 4]) {
    let a_s = src[3] as f64 / 255.0;
    let a_d = dst[3];
    let a_o = a_s + a_d * (1.0 - a_s);
    if a_o <= 0.0 {
        *dst = [0.0; 4];
        return;
    }
    for c in 0..3 {
        dst[c] = (src[c] as f64 * a_s + dst[c] * a_d * (1.0 - a_s)) / a_o;
    }
    dst[3] = a_o;
}

pub fn finish_pixel(acc: &[f64; 4]) -> [u8; 4] {
    [quantize(acc[0]), quantize(acc[1]), quantize(acc[2]), quantize(acc[3] * 255.0)]
}

/// The background resized to the canvas.
pub fn background_raster(state: &SceneState, assets: &AssetStore) -> Result<RgbaImage, SceneError> {
    let bg = assets
        .get(&state.background_id)
        .and_then(|a| a.layer.as_ref())
        .ok_or_else(|| SceneError::MissingAsset(state.background_id.clone()))?;
    Ok(resize_to(bg, state.canvas.width, state.canvas.height))
}

pub fn rasterize_all(state: &SceneState, assets: &AssetStore) -> Result<Vec<PlacedLayer>, SceneError> {
    state
        .objects
        .iter()
        .map(|inst| {
            let asset = assets
                .get(&inst.asset_id)
                .filter(|a| a.kind == AssetKind::Layer2d)
                .ok_or_else(|| SceneError::MissingAsset(inst.asset_id.clone()))?;
            rasterize_layer(asset, inst, state.canvas)
        })
        .collect()
}

/// Renders a compositing-domain state: background first, then every layer
/// from farthest to nearest.
pub fn composite(state: &SceneState, assets: &AssetStore) -> Result<Observation, SceneError> {
    if state.domain != Domain::Real {
        return Err(SceneError::InvalidState("composite renders the real domain only".into()));
    }
    let background = background_raster(state, assets)?;
    let layers = rasterize_all(state, assets)?;
    let (w, h) = (state.canvas.width as usize, state.canvas.height as usize);

    let mut acc: Vec<[f64; 4]> = background
        .pixels()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64 / 255.0])
        .collect();
    // index of the nearest layer with nonzero alpha per pixel
    let mut owner: Vec<u32> = vec![u32::MAX; w * h];

    let order = draw_order(state);
    for &li in &order {
        let layer = &layers[li];
        let Some(clip) = layer.clipped_rect else { continue };
        let lw = layer.raster.width() as usize;
        let raw = layer.raster.as_raw();
        for y in clip.y0..clip.y1 {
            let ly = (y - layer.origin.1) as usize;
            let row = &raw[ly * lw * 4..][..lw * 4];
            for x in clip.x0..clip.x1 {
                let lx = (x - layer.origin.0) as usize;
                let src = [row[lx * 4], row[lx * 4 + 1], row[lx * 4 + 2], row[lx * 4 + 3]];
                if src[3] == 0 {
                    continue;
                }
                let idx = y as usize * w + x as usize;
                source_over(&mut acc[idx], src);
                owner[idx] = li as u32;
            }
        }
    }

    let mut image = RgbaImage::new(w as u32, h as u32);
    for (dst, a) in image.pixels_mut().zip(&acc) {
        dst.0 = finish_pixel(a);
    }

    let mut visible = vec![0usize; layers.len()];
    for &o in &owner {
        if o != u32::MAX {
            visible[o as usize] += 1;
        }
    }
    let mut rank = vec![0usize; layers.len()];
    for (r, &li) in order.iter().enumerate() {
        rank[li] = r;
    }
    let annotations = state
        .objects
        .iter()
        .zip(&layers)
        .enumerate()
        .map(|(i, (inst, layer))| Annotation {
            instance_id: inst.instance_id.clone(),
            bbox_px: layer.footprint,
            clipped_bbox_px: layer.footprint.clip(state.canvas),
            centroid_px: layer.footprint.center(),
            visible_fraction: if layer.opaque_pixels == 0 {
                0.0
            } else {
                visible[i] as f64 / layer.opaque_pixels as f64
            },
            depth_rank: rank[i],
        })
        .collect();
    Ok(Observation { image, annotations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::AlphaMode;
    use image::Rgba;

    fn cfg512() -> SizeConfig {
        SizeConfig::for_shortest_side(512.0)
    }

    #[test]
    fn size_law_endpoints_and_midpoint() {
        let c = cfg512();
        assert!((compute_object_size(200.0, 1.0, &c).unwrap() - 25.6).abs() < 1e-9);
        assert!((compute_object_size(10.0, 1.0, &c).unwrap() - 128.0).abs() < 1e-9);
        assert!((compute_object_size(105.0, 1.0, &c).unwrap() - 76.8).abs() < 1e-9);
        assert!((compute_object_size(200.0, 2.0, &c).unwrap() - 51.2).abs() < 1e-9);
    }

    #[test]
    fn size_law_rejects_out_of_range_inputs() {
        let c = cfg512();
        assert!(compute_object_size(9.9, 1.0, &c).is_err());
        assert!(compute_object_size(200.1, 1.0, &c).is_err());
        assert!(compute_object_size(100.0, 0.1, &c).is_err());
        assert!(compute_object_size(100.0, 4.5, &c).is_err());
    }

    #[test]
    fn size_is_linear_in_scale() {
        let c = cfg512();
        let one = compute_object_size(77.0, 1.0, &c).unwrap();
        let three = compute_object_size(77.0, 3.0, &c).unwrap();
        assert!((three - 3.0 * one).abs() < 1e-9);
    }

    fn layer_asset(w: u32, h: u32) -> ObjectAsset {
        ObjectAsset::layer("l", RgbaImage::from_pixel(w, h, Rgba([1, 2, 3, 255])), AlphaMode::Straight, vec![]).unwrap()
    }

    /// Depth that yields `size` px on a 512 canvas at f_s = 1.
    fn depth_for(size: f64) -> f64 {
        let c = cfg512();
        200.0 - (size - c.shat_min) * 190.0 / (c.shat_max - c.shat_min)
    }

    #[test]
    fn square_asset_scales_uniformly() {
        let inst = ObjectInstance::layer("i", "l", [256.0, 256.0], depth_for(50.0), 1.0);
        let placed = rasterize_layer(&layer_asset(100, 100), &inst, Canvas::square(512)).unwrap();
        assert_eq!(placed.raster.dimensions(), (50, 50));
    }

    #[test]
    fn wide_asset_keeps_aspect() {
        let inst = ObjectInstance::layer("i", "l", [256.0, 256.0], depth_for(50.0), 1.0);
        let placed = rasterize_layer(&layer_asset(200, 100), &inst, Canvas::square(512)).unwrap();
        assert_eq!(placed.raster.dimensions(), (100, 50));
    }

    #[test]
    fn origin_centered_layer_has_negative_corner() {
        let inst = ObjectInstance::layer("i", "l", [0.0, 0.0], 100.0, 1.0);
        let placed = rasterize_layer(&layer_asset(10, 10), &inst, Canvas::square(512)).unwrap();
        assert!(placed.rect.x0 < 0 && placed.rect.y0 < 0);
        assert_eq!(placed.footprint, placed.rect);
    }

    #[test]
    fn subpixel_size_is_rejected() {
        // 16px canvas: s_min = 0.8 at d_max.
        let inst = ObjectInstance::layer("i", "l", [8.0, 8.0], 200.0, 1.0);
        let err = rasterize_layer(&layer_asset(10, 10), &inst, Canvas::square(16)).unwrap_err();
        assert!(matches!(err, SceneError::SubpixelSize(_)));
    }

    #[test]
    fn source_over_opaque_replaces() {
        let mut px = [10.0, 20.0, 30.0, 1.0];
        source_over(&mut px, [200, 100, 50, 255]);
        assert_eq!(finish_pixel(&px), [200, 100, 50, 255]);
    }
}
