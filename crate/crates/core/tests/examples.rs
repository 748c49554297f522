//! Worked examples with hand-derived expected values.

use std::fs;

use image::{Rgba, RgbaImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene_edit::assets::{AlphaMode, AssetStore, ObjectAsset};
use scene_edit::attention::{apply_lora, self_attention, AttentionParams, LoraAdapter, LoraAdapterSet};
use scene_edit::dataset::{export_sequence, validate_dataset, ASSETS_DIR};
use scene_edit::render_real::composite;
use scene_edit::sampler::{generate_sequence, initial_state, sample_command, SamplerConfig};
use scene_edit::{Canvas, Domain, ObjectInstance, Operation, SceneState};
use serde_json::Value;

#[test]
fn nearer_opaque_layer_wins_the_overlap() {
    let mut assets = AssetStore::new();
    let bg = RgbaImage::from_pixel(16, 16, Rgba([0, 0, 0, 255]));
    assets
        .insert(ObjectAsset::layer("bg", bg, AlphaMode::Straight, vec!["background".into()]).unwrap())
        .unwrap();
    for (id, color) in [("red", [255, 0, 0, 255]), ("blue", [0, 0, 255, 255])] {
        let img = RgbaImage::from_pixel(4, 4, Rgba(color));
        assets.insert(ObjectAsset::layer(id, img, AlphaMode::Straight, vec![]).unwrap()).unwrap();
    }
    let state = SceneState {
        domain: Domain::Real,
        background_id: "bg".into(),
        canvas: Canvas::square(16),
        objects: vec![
            ObjectInstance::layer("near", "blue", [9.0, 9.0], 50.0, 4.0),
            ObjectInstance::layer("far", "red", [7.0, 7.0], 150.0, 4.0),
        ],
        camera: None,
        rng_seed: 0,
    };
    let obs = composite(&state, &assets).unwrap();
    let near = obs.annotation("near").unwrap().bbox_px;
    let far = obs.annotation("far").unwrap().bbox_px;
    let mut overlap = 0;
    for y in 0..16 {
        for x in 0..16 {
            let in_near = x >= near.x0 && x < near.x1 && y >= near.y0 && y < near.y1;
            let in_far = x >= far.x0 && x < far.x1 && y >= far.y0 && y < far.y1;
            let px = obs.image.get_pixel(x as u32, y as u32).0;
            if in_near {
                assert_eq!(px, [0, 0, 255, 255]);
                overlap += in_far as usize;
            } else if in_far {
                assert_eq!(px, [255, 0, 0, 255]);
            } else {
                assert_eq!(px, [0, 0, 0, 255]);
            }
        }
    }
    assert!(overlap > 0, "layers must overlap for this example");
    assert!(obs.annotation("far").unwrap().visible_fraction < 1.0);
}

#[test]
fn image_translations_stay_within_sixty_percent_of_the_side() {
    let assets = AssetStore::demo(0, 64);
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let canvas = Canvas::square(512);
    let mut draws = 0;
    let mut state = initial_state(Domain::Real, &assets, canvas, &cfg, 0, &mut rng).unwrap();
    while draws < 10_000 {
        let s = sample_command(&state, &assets, &cfg, &mut rng).unwrap();
        if let Operation::TranslateImage { dx, dy, dd } = s.command.op {
            assert!(dx.abs() <= 307.2 && dy.abs() <= 307.2 && dd.abs() <= 30.0, "{:?}", s.command.op);
            draws += 1;
        }
        state = s.next;
    }
}

#[test]
fn self_attention_matches_double_loop() {
    let (t, d) = (8, 16);
    let p = AttentionParams::new(d, 4, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
    let got = self_attention(&x, &p);
    let proj = |w: &Array2<f64>, row: usize| -> Vec<f64> { (0..d).map(|o| (0..d).map(|i| w[[o, i]] * x[[row, i]]).sum()).collect() };
    for i in 0..t {
        let q = proj(&p.wq, i);
        let logits: Vec<f64> = (0..t)
            .map(|j| {
                let k = proj(&p.wk, j);
                q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut mixed = vec![0.0; d];
        for j in 0..t {
            let v = proj(&p.wv, j);
            for c in 0..d {
                mixed[c] += e[j] / z * v[c];
            }
        }
        for o in 0..d {
            let want: f64 = (0..d).map(|c| p.wo[[o, c]] * mixed[c]).sum();
            assert!((got[[i, o]] - want).abs() <= 1e-6 * want.abs().max(1.0), "[{i},{o}] {} vs {want}", got[[i, o]]);
        }
    }
}

#[test]
fn rank_one_adapter_is_an_outer_product() {
    let p = AttentionParams::new(4, 2, 1);
    let a = [0.5, -1.0, 2.0, 0.25];
    let b = [1.5, 0.0, -0.75, 3.0];
    let alpha = 2.0;
    let mut set = LoraAdapterSet::new(Domain::Real, 4, 1, alpha, 0).unwrap();
    set.adapters.insert(
        "ctx_k".into(),
        LoraAdapter {
            a: Array2::from_shape_vec((1, 4), a.to_vec()).unwrap(),
            b: Array2::from_shape_vec((4, 1), b.to_vec()).unwrap(),
            alpha,
        },
    );
    let merged = apply_lora(&p, Some(&set)).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let want = p.ctx_k[[i, j]] + alpha / 1.0 * b[i] * a[j];
            assert!((merged.ctx_k[[i, j]] - want).abs() <= 1e-12);
        }
    }
    // the untouched targets still carry zero B factors
    assert_eq!(merged.ctx_q, p.ctx_q);
    assert_eq!(merged.ctx_v, p.ctx_v);
    assert_eq!(merged.wq, p.wq);
}

#[test]
fn mutated_operation_value_is_a_schema_violation() {
    let assets = AssetStore::demo(0, 48);
    let cfg = SamplerConfig {
        seq_len: 4,
        r_max: 4,
        ..SamplerConfig::default()
    };
    let seq = generate_sequence(Domain::Real, &assets, Canvas::square(48), &cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assets.write_dir(dir.path().join(ASSETS_DIR)).unwrap();
    let path = export_sequence(&seq, dir.path(), "seq", "h", &assets).unwrap();
    assert!(validate_dataset(dir.path()).is_clean());

    let mut doc: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let value = &mut doc["rounds"][1]["op"]["value"];
    match value {
        Value::Array(v) => v[0] = Value::from(v[0].as_f64().unwrap() + 0.5),
        other => *other = Value::from(other.as_f64().unwrap() * 0.999),
    }
    fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
    let report = validate_dataset(dir.path());
    assert_eq!(report.violations.len(), 1, "{:?}", report.violations);
    assert_eq!(report.violations[0].code, "SchemaViolation");
    assert_eq!(report.violations[0].round, Some(2));
}
