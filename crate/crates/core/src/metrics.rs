//! Content-consistency metrics.

use image::RgbaImage;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const L: f64 = 255.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("images differ in size: {0:?} vs {1:?}")]
    ShapeMismatch((u32, u32), (u32, u32)),
    #[error("image {0:?} is smaller than the {WINDOW}x{WINDOW} window")]
    TooSmall((u32, u32)),
    #[error("a series needs at least two frames")]
    SeriesTooShort,
}

fn same_shape(a: &RgbaImage, b: &RgbaImage) -> Result<(), MetricError> {
    if a.dimensions() != b.dimensions() {
        return Err(MetricError::ShapeMismatch(a.dimensions(), b.dimensions()));
    }
    Ok(())
}

/// PSNR in dB over the RGB channels; infinite for identical images.
pub fn psnr(a: &RgbaImage, b: &RgbaImage) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        for c in 0..3 {
            let d = pa.0[c] as f64 - pb.0[c] as f64;
            sum += d * d;
        }
        n += 3;
    }
    if sum == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sum / n as f64;
    Ok(10.0 * (L * L / mse).log10())
}

fn luma(img: &RgbaImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .collect()
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM on Rec.601 luma with an 11x11 Gaussian window
/// (sigma 1.5), valid positions only.
pub fn ssim(a: &RgbaImage, b: &RgbaImage) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < WINDOW || h < WINDOW {
        return Err(MetricError::TooSmall(a.dimensions()));
    }
    let k = gaussian_window();
    let x = luma(a);
    let y = luma(b);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&xx, w, h, &k);
    let syy = filter_valid(&yy, w, h, &k);
    let sxy = filter_valid(&xy, w, h, &k);
    let c1 = (K1 * L).powi(2);
    let c2 = (K2 * L).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Averages `metric` over adjacent frame pairs of a series.
pub fn series_mean(
    frames: &[RgbaImage],
    metric: fn(&RgbaImage, &RgbaImage) -> Result<f64, MetricError>,
) -> Result<f64, MetricError> {
    if frames.len() < 2 {
        return Err(MetricError::SeriesTooShort);
    }
    let scores = frames.windows(2).map(|p| metric(&p[0], &p[1])).collect::<Result<Vec<_>, _>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgba;

    #[test]
    fn psnr_closed_forms() {
        let a = RgbaImage::from_pixel(8, 8, Rgba([10, 20, 30, 255]));
        let b = RgbaImage::from_pixel(8, 8, Rgba([11, 21, 31, 0]));
        let black = RgbaImage::from_pixel(8, 8, Rgba([0, 0, 0, 255]));
        let white = RgbaImage::from_pixel(8, 8, Rgba([255, 255, 255, 255]));
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &b).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        assert!(psnr(&a, &RgbaImage::new(4, 4)).is_err());
    }

    #[test]
    fn ssim_on_constants_is_luminance_term() {
        let a = RgbaImage::from_pixel(16, 16, Rgba([100, 100, 100, 255]));
        let b = RgbaImage::from_pixel(16, 16, Rgba([140, 140, 140, 255]));
        let c1 = (0.01f64 * 255.0).powi(2);
        let want = (2.0 * 100.0 * 140.0 + c1) / (100.0f64.powi(2) + 140.0f64.powi(2) + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&RgbaImage::new(10, 20), &RgbaImage::new(10, 20)).unwrap_err(), MetricError::TooSmall((10, 20)));
    }

    #[test]
    fn series_average() {
        let f = |v| RgbaImage::from_pixel(12, 12, Rgba([v, v, v, 255]));
        let frames = [f(0), f(1), f(3)];
        let want = (psnr(&frames[0], &frames[1]).unwrap() + psnr(&frames[1], &frames[2]).unwrap()) / 2.0;
        assert_eq!(series_mean(&frames, psnr).unwrap(), want);
        assert!(series_mean(&frames[..1], psnr).is_err());
    }
}
