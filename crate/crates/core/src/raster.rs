//! Raster primitives shared by the renderers: bilinear resampling, PNG
//! encoding, and binary grid masks.

use std::io::Cursor;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::scene::NormBox;

/// Rounds a float channel value in `[0, 255]` to a byte, ties to even.
#[inline]
pub fn quantize(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round_ties_even() as u8
}

/// Resamples `src` with a bilinear filter into an `out_w` x `out_h` raster.
///
/// `scale_x`/`scale_y` are the real-valued magnification factors; they are
/// used for the sample mapping instead of the integer size ratio so that a
/// layer keeps its exact real size through resampling. Samples outside the
/// source clamp to the edge. All four channels are interpolated
/// independently (straight alpha).
pub fn resize_bilinear(
    src: &RgbaImage,
    scale_x: f64,
    scale_y: f64,
    out_w: u32,
    out_h: u32,
) -> RgbaImage {
    let (sw, sh) = src.dimensions();
    let mut out = RgbaImage::new(out_w, out_h);
    if sw == 0 || sh == 0 {
        return out;
    }
    let max_x = (sw - 1) as f64;
    let max_y = (sh - 1) as f64;

    // Horizontal taps are identical for every row.
    let taps_x: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|ox| {
            let sx = ((ox as f64 + 0.5) / scale_x - 0.5).clamp(0.0, max_x);
            let x0 = sx.floor();
            let x1 = (x0 + 1.0).min(max_x);
            (x0 as usize, x1 as usize, sx - x0)
        })
        .collect();

    let raw = src.as_raw();
    let stride = sw as usize * 4;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) / scale_y - 0.5).clamp(0.0, max_y);
        let y0 = sy.floor();
        let y1 = (y0 + 1.0).min(max_y);
        let fy = sy - y0;
        let row0 = &raw[y0 as usize * stride..][..stride];
        let row1 = &raw[y1 as usize * stride..][..stride];
        for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
            let mut px = [0u8; 4];
            for (c, slot) in px.iter_mut().enumerate() {
                let p00 = row0[x0 * 4 + c] as f64;
                let p01 = row0[x1 * 4 + c] as f64;
                let p10 = row1[x0 * 4 + c] as f64;
                let p11 = row1[x1 * 4 + c] as f64;
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                *slot = quantize(top + (bottom - top) * fy);
            }
            out.put_pixel(ox as u32, oy, Rgba(px));
        }
    }
    out
}

/// Resizes `src` to exactly `w` x `h` (non-uniform stretch allowed).
pub fn resize_to(src: &RgbaImage, w: u32, h: u32) -> RgbaImage {
    if src.dimensions() == (w, h) {
        return src.clone();
    }
    let (sw, sh) = src.dimensions();
    resize_bilinear(src, w as f64 / sw as f64, h as f64 / sh as f64, w, h)
}

/// Encodes an RGBA raster as a non-interlaced 8-bit PNG.
///
/// Compression settings are fixed so the output bytes only depend on the
/// pixels.
pub fn encode_png(img: &RgbaImage) -> Vec<u8> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Sub)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgba8,
        )
        .expect("in-memory PNG encoding cannot fail for a well-formed raster");
    buf
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbaImage, image::ImageError> {
    let reader = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png);
    Ok(reader.decode()?.to_rgba8())
}

/// Binary mask over an `height` x `width` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            cells: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            cells: vec![1; height * width],
        }
    }

    /// Rasterizes a normalized box: a cell is set iff its center lies inside
    /// the closed box.
    pub fn from_box(bbox: &NormBox, height: usize, width: usize) -> Self {
        let mut mask = Mask::zeros(height, width);
        for i in 0..height {
            let v = (i as f64 + 0.5) / height as f64;
            if v < bbox.v0 || v > bbox.v1 {
                continue;
            }
            for j in 0..width {
                let u = (j as f64 + 0.5) / width as f64;
                if u >= bbox.u0 && u <= bbox.u1 {
                    mask.cells[i * width + j] = 1;
                }
            }
        }
        mask
    }

    /// Nearest-cell resampling: each output cell takes the value of the
    /// source cell containing its center.
    pub fn resample(&self, height: usize, width: usize) -> Self {
        let mut out = Mask::zeros(height, width);
        if self.height == 0 || self.width == 0 {
            return out;
        }
        for i in 0..height {
            let si = (((i as f64 + 0.5) / height as f64) * self.height as f64).floor() as usize;
            let si = si.min(self.height - 1);
            for j in 0..width {
                let sj = (((j as f64 + 0.5) / width as f64) * self.width as f64).floor() as usize;
                let sj = sj.min(self.width - 1);
                out.cells[i * width + j] = self.cells[si * self.width + sj];
            }
        }
        out
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col] != 0
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.cells.iter().all(|&c| c == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_lossless() {
        let mut img = RgbaImage::new(5, 3);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = Rgba([i as u8 * 7, 255 - i as u8, 3, 200]);
        }
        assert_eq!(resize_bilinear(&img, 1.0, 1.0, 5, 3), img);
    }

    #[test]
    fn uniform_image_stays_uniform() {
        let img = RgbaImage::from_pixel(7, 9, Rgba([10, 20, 30, 40]));
        let out = resize_bilinear(&img, 0.37, 0.37, 3, 4);
        assert!(out.pixels().all(|p| *p == Rgba([10, 20, 30, 40])));
    }

    #[test]
    fn png_round_trip_and_determinism() {
        let mut img = RgbaImage::new(16, 8);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = Rgba([x as u8 * 13, y as u8 * 29, (x ^ y) as u8, (x * y) as u8]);
        }
        let a = encode_png(&img);
        let b = encode_png(&img);
        assert_eq!(a, b);
        assert_eq!(decode_png(&a).unwrap(), img);
    }

    #[test]
    fn mask_cell_center_rule() {
        let bbox = NormBox::new(0.25, 0.25, 0.5, 0.5);
        let m = Mask::from_box(&bbox, 4, 4);
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 1));
    }

    #[test]
    fn quantize_ties_to_even() {
        assert_eq!(quantize(0.5), 0);
        assert_eq!(quantize(1.5), 2);
        assert_eq!(quantize(254.5), 254);
        assert_eq!(quantize(300.0), 255);
    }
}
