use image::{Rgba, RgbaImage};
use ndarray::Array2;
use proptest::prelude::*;
use scene_edit::assets::AssetStore;
use scene_edit::attention::{context_self_attention, self_attention, AttentionParams};
use scene_edit::conditioning::{encode_condition, EncoderParams, Slot};
use scene_edit::metrics::{psnr, ssim};
use scene_edit::planner::BoxPose;
use scene_edit::raster::Mask;
use scene_edit::scene::{footprint, validate_state, Axis, NormBox};
use scene_edit::{apply_operation, Canvas, Domain, ObjectInstance, Operation, OperationCommand, SceneState};

fn array(rows: usize, cols: usize, values: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(r, c)| values[(r * cols + c) % values.len()] + (r as f64) * 0.01 - (c as f64) * 0.003)
}

fn syn_state(asset: &str, rotation: [f64; 3], scale: f64) -> SceneState {
    SceneState {
        domain: Domain::Syn,
        background_id: "ground".into(),
        canvas: Canvas::square(64),
        objects: vec![ObjectInstance::cuboid("b", asset, [0.0, 0.5, 0.0], rotation, scale)],
        camera: Some(Default::default()),
        rng_seed: 0,
    }
}

fn lowest_corner(state: &SceneState, assets: &AssetStore) -> f64 {
    let pose = BoxPose::of(&state.objects[0], assets).unwrap();
    pose.corners().iter().map(|c| c[1]).fold(f64::INFINITY, f64::min)
}

fn op_strategy() -> impl Strategy<Value = Operation> {
    prop_oneof![
        (-40.0..40.0f64).prop_map(|d| Operation::Rotate { axis: Axis::X, degrees: d }),
        (-40.0..40.0f64).prop_map(|d| Operation::Rotate { axis: Axis::Y, degrees: d }),
        (-40.0..40.0f64).prop_map(|d| Operation::Rotate { axis: Axis::Z, degrees: d }),
        (0.6..1.5f64).prop_map(Operation::Scale),
        ((-1.0..1.0f64), (-1.0..1.0f64)).prop_map(|(dx, dz)| Operation::TranslateGround { dx, dz }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Every accepted transition leaves each box resting on the ground.
    #[test]
    fn boxes_stay_grounded(asset in 0usize..6, ops in prop::collection::vec(op_strategy(), 1..8)) {
        let assets = AssetStore::demo(0, 64);
        let mut state = syn_state(&format!("box_{asset:02}"), [0.0; 3], 1.0);
        let start = apply_operation(&state, &OperationCommand::new("b", Operation::Scale(1.0)), &assets).unwrap();
        state = start;
        for op in ops {
            if let Ok(next) = apply_operation(&state, &OperationCommand::new("b", op), &assets) {
                prop_assert!(lowest_corner(&next, &assets).abs() < 1e-9);
                prop_assert!(validate_state(&next, &assets).is_empty());
                state = next;
            }
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant(
        t in 1usize..12,
        d in 1usize..10,
        seed in any::<u64>(),
        values in prop::collection::vec(-2.0..2.0f64, 1..64),
        perm_seed in any::<u64>(),
    ) {
        let p = AttentionParams::new(d, 3, seed);
        let x = array(t, d, &values);
        let mut perm: Vec<usize> = (0..t).collect();
        // Fisher-Yates driven by perm_seed
        let mut s = perm_seed;
        for i in (1..t).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted = Array2::from_shape_fn((t, d), |(r, c)| x[[perm[r], c]]);
        let y = self_attention(&x, &p);
        let y_perm = self_attention(&permuted, &p);
        for r in 0..t {
            for c in 0..d {
                prop_assert!((y_perm[[r, c]] - y[[perm[r], c]]).abs() <= 1e-12 * y[[perm[r], c]].abs().max(1.0));
            }
        }
    }

    /// Features of the previous round outside its mask are never read.
    #[test]
    fn context_attention_ignores_unmasked_previous_tokens(
        h in 1usize..6,
        w in 1usize..6,
        d in 1usize..8,
        seed in any::<u64>(),
        bits in prop::collection::vec(any::<(bool, bool, bool)>(), 36),
        values in prop::collection::vec(-3.0..3.0f64, 8..64),
        noise in -50.0..50.0f64,
    ) {
        let n = h * w;
        let mut p = AttentionParams::new(d, 2, seed);
        p.lambda = 0.7;
        let mask = |k: usize| Mask { height: h, width: w, cells: bits[..n].iter().map(|b| [b.0, b.1, b.2][k] as u8).collect() };
        let (m_cur, m_prev, m_tgt) = (mask(0), mask(1), mask(2));
        let cur = array(n, d, &values);
        let prev = array(n, d, &values[3..]);
        let mut scrambled = prev.clone();
        for j in 0..n {
            if m_prev.cells[j] == 0 {
                scrambled.row_mut(j).fill(noise);
            }
        }
        let a = context_self_attention(&cur, &prev, &m_cur, &m_prev, &m_tgt, &p).unwrap();
        let b = context_self_attention(&cur, &scrambled, &m_cur, &m_prev, &m_tgt, &p).unwrap();
        prop_assert_eq!(a, b);
    }

    /// With the presence flag off, the encoding does not depend on the value.
    #[test]
    fn absent_condition_is_constant(slot in 0usize..7, a in prop::collection::vec(-10.0..10.0f64, 4), b in prop::collection::vec(-10.0..10.0f64, 4)) {
        let params = EncoderParams::new(8, 16, 5);
        let slot = Slot::ALL[slot];
        let k = slot.dim();
        let ea = encode_condition(slot, &a[..k], false, &params).unwrap();
        let eb = encode_condition(slot, &b[..k], false, &params).unwrap();
        prop_assert_eq!(ea, eb);
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>(), w in 11u32..24, h in 11u32..24) {
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); (s >> 56) as u8 };
        let a = RgbaImage::from_fn(w, h, |_, _| Rgba([next(), next(), next(), 255]));
        let b = RgbaImage::from_fn(w, h, |_, _| Rgba([next(), next(), next(), 255]));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let (sab, sba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((sab - sba).abs() < 1e-12);
        prop_assert!(sab <= 1.0 + 1e-12);
    }

    /// Box masks set exactly the cells whose centers fall inside the box.
    #[test]
    fn box_mask_matches_cell_center_rule(
        u in (0.0..1.0f64, 0.0..1.0f64),
        v in (0.0..1.0f64, 0.0..1.0f64),
        h in 1usize..40,
        w in 1usize..40,
    ) {
        let bbox = NormBox::new(u.0.min(u.1), v.0.min(v.1), u.0.max(u.1), v.0.max(v.1));
        let m = Mask::from_box(&bbox, h, w);
        let mut want = 0;
        for r in 0..h {
            for c in 0..w {
                let cu = (c as f64 + 0.5) / w as f64;
                let cv = (r as f64 + 0.5) / h as f64;
                let inside = cu >= bbox.u0 && cu <= bbox.u1 && cv >= bbox.v0 && cv <= bbox.v1;
                prop_assert_eq!(m.get(r, c), inside, "cell {},{}", r, c);
                want += inside as usize;
            }
        }
        prop_assert_eq!(m.count(), want);
    }

    /// Translating a layer by integer offsets and back restores the state.
    #[test]
    fn layer_translation_round_trips(dx in -20i32..20, dy in -20i32..20, dd in -20i32..20) {
        let assets = AssetStore::demo(0, 64);
        let state = SceneState {
            domain: Domain::Real,
            background_id: "bg_00".into(),
            canvas: Canvas::square(64),
            objects: vec![ObjectInstance::layer("a", "obj_02", [32.0, 32.0], 100.0, 1.0)],
            camera: None,
            rng_seed: 0,
        };
        let there = OperationCommand::new("a", Operation::TranslateImage { dx: dx as f64, dy: dy as f64, dd: dd as f64 });
        let back = OperationCommand::new("a", Operation::TranslateImage { dx: -dx as f64, dy: -dy as f64, dd: -dd as f64 });
        let moved = apply_operation(&state, &there, &assets).unwrap();
        let fp = footprint(&moved, &assets, "a").unwrap();
        let fp0 = footprint(&state, &assets, "a").unwrap();
        if dd == 0 {
            prop_assert_eq!((fp.x0 - fp0.x0, fp.y0 - fp0.y0), (dx as i64, dy as i64));
        }
        prop_assert_eq!(apply_operation(&moved, &back, &assets).unwrap(), state);
    }

    /// States survive a JSON round trip bit for bit.
    #[test]
    fn state_json_round_trip(x in -4.0..4.0f64, z in -4.0..4.0f64, rot in prop::array::uniform3(-60.0..60.0f64), scale in 0.2..4.0f64) {
        let mut state = syn_state("box_01", rot, scale);
        if let scene_edit::scene::Placement::Box { position, .. } = &mut state.objects[0].placement {
            position[0] = x;
            position[2] = z;
        }
        let json = serde_json::to_string(&state).unwrap();
        let back: SceneState = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, state);
    }
}
