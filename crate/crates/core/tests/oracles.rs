use image::{Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene_edit::assets::AssetStore;
use scene_edit::conditioning::{frame_encode, ChannelStack, FrameEncoderParams};
use scene_edit::metrics::ssim;
use scene_edit::planner::proxy::depth_buffer;
use scene_edit::planner::{mat_vec, rotation_matrix, BoxPose, Camera};
use scene_edit::sampler::{generate_sequence, initial_state, sample_training_window, SamplerConfig};
use scene_edit::{Canvas, Domain};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// The history length drawn for training windows is uniform on
/// `[r_min, r_max]`.
#[test]
fn training_window_length_is_uniform() {
    let assets = AssetStore::demo(0, 32);
    let cfg = SamplerConfig {
        seq_len: 16,
        r_max: 16,
        ..SamplerConfig::default()
    };
    let seq = generate_sequence(Domain::Real, &assets, Canvas::square(32), &cfg, 9).unwrap();
    assert!(!seq.truncated);
    let (r_min, r_max) = (1, 12);
    let bins = r_max - r_min + 1;
    let draws = 10_000;
    let mut counts = vec![0usize; bins];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..draws {
        let (history, target) = sample_training_window(&seq, &mut rng, r_min, r_max).unwrap();
        let r = history.len();
        assert_eq!(history.frames.len(), r);
        // the target is the frame right after the window
        let last = history.records.last().unwrap().round_index;
        assert_eq!(target, seq.observations[last]);
        counts[r - r_min] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-squared {stat:.2}, p = {p:.5}, counts {counts:?}");
}

/// Nearest hit of a ray against an oriented box, by slab tests in the
/// box frame.
fn ray_box(origin: [f64; 3], dir: [f64; 3], pose: &BoxPose) -> Option<f64> {
    let r = rotation_matrix(pose.rotation_deg);
    let rt = [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]];
    let o = mat_vec(&rt, [0, 1, 2].map(|k| origin[k] - pose.position[k]));
    let d = mat_vec(&rt, dir);
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        let half = pose.extent[k] * pose.scale / 2.0;
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half {
                return None;
            }
            continue;
        }
        let a = (-half - o[k]) / d[k];
        let b = (half - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// The proxy z-buffer agrees with per-pixel ray casting on which box is
/// visible and at what view depth.
#[test]
fn proxy_visibility_matches_ray_casting() {
    let assets = AssetStore::demo(0, 64);
    let canvas = Canvas::new(96, 72);
    let cfg = SamplerConfig::default();
    let mut total = 0usize;
    let mut agree = 0usize;
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq_cfg = SamplerConfig { seq_len: 6, r_max: 6, ..cfg.clone() };
        let initial = initial_state(Domain::Syn, &assets, canvas, &seq_cfg, seed, &mut rng).unwrap();
        let seq = scene_edit::sampler::build_sequence(initial, &assets, &seq_cfg, &mut rng).unwrap();
        let state = seq.states.last().unwrap();
        let camera: Camera = state.camera.unwrap();
        let poses: Vec<BoxPose> = state.objects.iter().map(|o| BoxPose::of(o, &assets).unwrap()).collect();
        let all: Vec<usize> = (0..poses.len()).collect();
        let buf = depth_buffer(state, &assets, &all).unwrap();
        for y in 0..canvas.height {
            for x in 0..canvas.width {
                let (origin, dir) = camera.ray(x as f64 + 0.5, y as f64 + 0.5, canvas);
                let hit = poses
                    .iter()
                    .enumerate()
                    .filter_map(|(i, p)| ray_box(origin, dir, p).map(|t| (i, t)))
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                let k = (y * canvas.width + x) as usize;
                total += 1;
                if hit.map(|h| h.0) == buf.ids[k] {
                    agree += 1;
                    if let Some((_, t)) = hit {
                        // the forward component of the ray direction is one
                        assert!((buf.depth[k] - t).abs() <= 1e-6 * t, "depth {} vs {t}", buf.depth[k]);
                    }
                }
            }
        }
    }
    // only pixels whose centers sit on a silhouette edge may disagree
    let rate = agree as f64 / total as f64;
    assert!(rate > 0.995, "agreement {rate:.4}");
}

/// An output cell of the frame encoder never depends on input pixels
/// beyond its receptive field: one pixel of stem padding, plus for each of
/// the two stages a stride-2 conv and a 3x3 conv.
#[test]
fn frame_encoder_is_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = FrameEncoderParams::new(5, 6, 4, 2, 11);
    params.proj.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let (h, w) = (64, 64);
    let mut stack = ChannelStack::zeros(5, h, w);
    stack.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    let base = frame_encode(&stack, &params, (16, 16)).unwrap();
    for _ in 0..20 {
        let (py, px, c) = (rng.random_range(0..h), rng.random_range(0..w), rng.random_range(0..5));
        let mut poked = stack.clone();
        *poked.at_mut(c, py, px) += 5.0;
        let out = frame_encode(&poked, &params, (16, 16)).unwrap();
        let mut changed_near = false;
        for oy in 0..16 {
            for ox in 0..16 {
                // input rows 4k-10 ..= 4k+11 can reach output row k
                let reach = |p: usize, k: usize| (p as i64) >= 4 * k as i64 - 10 && (p as i64) <= 4 * k as i64 + 11;
                let differs = (0..4).any(|o| out.at(o, oy, ox) != base.at(o, oy, ox));
                if !(reach(py, oy) && reach(px, ox)) {
                    assert!(!differs, "pixel ({py},{px}) reached cell ({oy},{ox})");
                }
                if oy == py / 4 && ox == px / 4 {
                    changed_near |= differs;
                }
            }
        }
        assert!(changed_near, "pixel ({py},{px}) did not reach its own cell");
    }
}

#[test]
fn ssim_of_inverted_image_is_negative() {
    let a = RgbaImage::from_fn(32, 32, |x, y| {
        let v = if (x / 4 + y / 4) % 2 == 0 { 230 } else { 20 };
        Rgba([v, v, v, 255])
    });
    let inv = RgbaImage::from_fn(32, 32, |x, y| {
        let p = a.get_pixel(x, y).0;
        Rgba([255 - p[0], 255 - p[1], 255 - p[2], 255])
    });
    let s = ssim(&a, &inv).unwrap();
    assert!(s < 0.0, "ssim {s}");
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}
