use proptest::prelude::*;
use rand::Rng as _;

use p4c::augment::{jitter, make_views, AugmentConfig, AugmentMode, Extra};
use p4c::geom;
use p4c::harness::config::TrainConfig;
use p4c::harness::inputs::{disturbed_block, Neighborhoods, ViewTables};
use p4c::harness::objective::{batch_blocks, step_loss, Objective, TrainBranches};
use p4c::loss::{loss_oracle, pair_info_nce, LossConfig};
use p4c::model::{forward, fuse, EncoderParams, FeatureMatrix, FusionMode, Head};
use p4c::pairing::{build_pair_batch, hardness_bound, sample_disturbance, HardnessSchedule};
use p4c::rng;
use p4c::scene::{backproject, generate_scene, project, Camera, Scene, SceneConfig};

fn small_scene(seed: u64) -> Scene {
    generate_scene(
        seed,
        &SceneConfig {
            primitives: 3,
            points_per_primitive: 60,
            extent: 1.5,
        },
    )
    .unwrap()
}

fn unit_rows(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    let mut r = rng::rng(seed);
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..cols).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    FeatureMatrix::from_rows(&data)
}

fn permute_rows(m: &FeatureMatrix, perm: &[usize]) -> FeatureMatrix {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
    FeatureMatrix::from_rows(&rows)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projection_round_trip_and_injectivity(seed in any::<u64>(), cam_seed in any::<u64>()) {
        let s = small_scene(seed);
        let cam = Camera::random(&mut rng::rng(cam_seed), s.extent, 48);
        let img = project(&s, &cam);
        let back = backproject(&img, &cam);
        let mut seen = vec![false; s.len()];
        for b in &back {
            prop_assert!(geom::dist(b.position, s.points[b.point_index]) < 1e-9);
            prop_assert!(!seen[b.point_index]);
            seen[b.point_index] = true;
        }
    }

    #[test]
    fn generation_is_pure(seed in any::<u64>()) {
        prop_assert_eq!(small_scene(seed), small_scene(seed));
    }

    #[test]
    fn zero_sigma_jitter_is_identity(seed in any::<u64>(), noise_seed in any::<u64>()) {
        let s = small_scene(seed);
        prop_assert_eq!(jitter(&s, 0.0, 0.0, noise_seed).unwrap(), s);
    }

    #[test]
    fn views_keep_labels_and_sound_correspondence(seed in any::<u64>(), view_seed in any::<u64>(), extras in 0usize..4) {
        let s = small_scene(seed);
        let mut cfg = AugmentConfig::for_extent(s.extent);
        cfg.image_size = 48;
        cfg.mode = AugmentMode::with(&[[Extra::Rotation, Extra::Scaling, Extra::Translation, Extra::Flip][extras]]);
        let (v1, v2, corr) = make_views(&s, &cfg, view_seed).unwrap();
        prop_assert_eq!(&v1.scene.labels, &s.labels);
        prop_assert_eq!(&v2.scene.labels, &s.labels);
        for &(i, j) in &corr {
            prop_assert_eq!(i, j);
            prop_assert!(v1.pixel_of[i].is_some() && v2.pixel_of[j].is_some());
            prop_assert_eq!(v1.image.corr[v1.pixel_of[i].unwrap()], i as i64);
            prop_assert_eq!(v2.image.corr[v2.pixel_of[j].unwrap()], j as i64);
        }
    }

    #[test]
    fn schedule_is_monotone_and_capped(h0 in 0.1f64..5.0, extra in 0.0f64..50.0, total in 1usize..5000) {
        let s = HardnessSchedule::default_for(1.0 / h0, total);
        let s = HardnessSchedule { epsilon: s.h0 + extra, ..s };
        let mut prev = hardness_bound(0, &s);
        prop_assert_eq!(prev, s.h0);
        for k in 1..=total + 10 {
            let b = hardness_bound(k, &s);
            prop_assert!(b >= prev && b <= s.epsilon);
            prev = b;
        }
    }

    #[test]
    fn disturbance_respects_bound_or_flags_fallback(seed in any::<u64>(), draw in any::<u64>(), i in 0usize..180, bound in 0.5f64..40.0) {
        let s = small_scene(seed);
        let d = sample_disturbance(i, &s.points, bound, &mut rng::rng(draw)).unwrap();
        prop_assert_ne!(d.index, i);
        let inside = |j: usize| j != i && geom::dist(s.points[i], s.points[j]) < 1.0 / bound;
        if d.fallback {
            prop_assert!(!(0..s.len()).any(inside));
        } else {
            prop_assert!(inside(d.index));
        }
    }

    #[test]
    fn pair_batches_are_deterministic(seed in any::<u64>(), draw in any::<u64>(), it in 0usize..100) {
        let s = small_scene(seed);
        let corr: Vec<(usize, usize)> = (0..s.len()).map(|i| (i, i)).collect();
        let sched = HardnessSchedule::default_for(s.extent, 100);
        let a = build_pair_batch(&s.points, &corr, it, 16, &sched, &mut rng::rng(draw)).unwrap();
        let b = build_pair_batch(&s.points, &corr, it, 16, &sched, &mut rng::rng(draw)).unwrap();
        prop_assert!(a.disturb_map.iter().zip(&a.positive_idx).all(|(d, p)| d != p));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn encoder_rows_are_unit_and_permutation_equivariant(seed in any::<u64>(), fusion_ix in 0usize..3) {
        let fusion = [FusionMode::Early, FusionMode::Late, FusionMode::Hybrid][fusion_ix];
        let s = small_scene(seed);
        let mut cfg = AugmentConfig::for_extent(s.extent);
        cfg.image_size = 48;
        let (v1, _, corr) = make_views(&s, &cfg, 5).unwrap();
        let params = EncoderParams::init(fusion, 8, 4, 4, &mut rng::rng(seed ^ 1)).unwrap();
        let t = ViewTables::new(&v1, fusion);
        let q: Vec<usize> = corr.iter().take(12).map(|c| c.0).collect();
        let nb = Neighborhoods::compute(&v1, &q, 4, fusion.uses_pixel_branch());
        let block = p4c::harness::inputs::plain_block(&t, &q, &nb);
        let f = forward(&params, &block, Head::Fused).unwrap().0;
        prop_assert!(f.unit_norm_error() < 1e-9);

        let perm: Vec<usize> = (0..q.len()).rev().collect();
        let qp: Vec<usize> = perm.iter().map(|&i| q[i]).collect();
        let nbp = Neighborhoods::compute(&v1, &qp, 4, fusion.uses_pixel_branch());
        let fp = forward(&params, &p4c::harness::inputs::plain_block(&t, &qp, &nbp), Head::Fused).unwrap().0;
        prop_assert_eq!(fp, permute_rows(&f, &perm));
    }

    #[test]
    fn fusion_identities(seed in any::<u64>(), rows in 1usize..10) {
        let a = unit_rows(rows, 5, seed);
        prop_assert_eq!(fuse(&a, None, FusionMode::Early).unwrap(), a.clone());
        let h = fuse(&a, Some(&a), FusionMode::Hybrid).unwrap();
        for i in 0..rows {
            for c in 0..5 {
                prop_assert!((h.row(i)[c] - a.row(i)[c] / 2f64.sqrt()).abs() < 1e-12);
                prop_assert!((h.row(i)[c + 5] - a.row(i)[c] / 2f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_matches_oracle(seed in any::<u64>(), b in 1usize..=8, nd in 0usize..=8, tau_ix in 0usize..3, incl in any::<bool>()) {
        let cfg = LossConfig { tau: [0.05, 0.4, 1.0][tau_ix], include_positive_in_denominator: incl };
        let a = unit_rows(b, 6, seed);
        let p = unit_rows(b, 6, seed ^ 0xA);
        let d = unit_rows(nd, 6, seed ^ 0xB);
        let dist = (nd > 0).then_some(&d);
        if b == 1 && nd == 0 && !incl {
            prop_assert!(pair_info_nce(&a, &p, dist, &cfg).is_err());
            return Ok(());
        }
        let fast = pair_info_nce(&a, &p, dist, &cfg).unwrap().loss;
        let slow = loss_oracle(&a, &p, dist, &cfg).unwrap();
        prop_assert!(rel(fast, slow) < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn loss_is_symmetric_under_relabeling(seed in any::<u64>(), b in 2usize..=8, nd in 1usize..=8, shift in 1usize..8) {
        let cfg = LossConfig::default();
        let a = unit_rows(b, 5, seed);
        let p = unit_rows(b, 5, seed ^ 0xA);
        let d = unit_rows(nd, 5, seed ^ 0xB);
        let base = pair_info_nce(&a, &p, Some(&d), &cfg).unwrap().loss;
        let pb: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let pd: Vec<usize> = (0..nd).rev().collect();
        let moved = pair_info_nce(&permute_rows(&a, &pb), &permute_rows(&p, &pb), Some(&permute_rows(&d, &pd)), &cfg).unwrap().loss;
        prop_assert!((base - moved).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn included_positive_keeps_loss_nonnegative(seed in any::<u64>(), b in 1usize..=8, nd in 0usize..=8, tau in 0.01f64..2.0) {
        let cfg = LossConfig { tau, include_positive_in_denominator: true };
        let d = unit_rows(nd, 4, seed ^ 0xB);
        let l = pair_info_nce(&unit_rows(b, 4, seed), &unit_rows(b, 4, seed ^ 0xA), (nd > 0).then_some(&d), &cfg).unwrap();
        prop_assert!(l.loss >= 0.0 && l.loss.is_finite());
    }
}

#[test]
fn excluded_positive_loss_can_be_negative() {
    let a = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let cfg = LossConfig::default();
    assert!(pair_info_nce(&a, &a, None, &cfg).unwrap().loss < 0.0);
}

#[test]
fn extreme_similarities_stay_finite() {
    let a = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]]);
    let cfg = LossConfig {
        tau: 0.01,
        include_positive_in_denominator: false,
    };
    let out = pair_info_nce(&a, &a, Some(&a), &cfg).unwrap();
    assert!(out.loss.is_finite());
    assert!(out.grad_anchors.data.iter().all(|v| v.is_finite()));
}

fn step_fixture(
    seed: u64,
    fusion: FusionMode,
) -> (
    p4c::augment::View,
    p4c::augment::View,
    p4c::pairing::PairBatch,
    EncoderParams,
) {
    let s = small_scene(seed);
    let mut cfg = AugmentConfig::for_extent(s.extent);
    cfg.image_size = 48;
    let (v1, v2, corr) = make_views(&s, &cfg, seed).unwrap();
    let sched = HardnessSchedule::default_for(s.extent, 10);
    let batch = build_pair_batch(&v1.scene.points, &corr, 3, 8, &sched, &mut rng::rng(seed)).unwrap();
    let params = EncoderParams::init(fusion, 8, 4, 4, &mut rng::rng(seed ^ 7)).unwrap();
    (v1, v2, batch, params)
}

#[test]
fn pointcontrast_is_the_loss_with_no_disturbed_block() {
    for seed in 0..5 {
        let (v1, v2, batch, params) = step_fixture(seed, FusionMode::Early);
        let t1 = ViewTables::new(&v1, FusionMode::Early);
        let t2 = ViewTables::new(&v2, FusionMode::Early);
        let with = batch_blocks(&t1, &t2, &v1, &v2, &batch, 4, false, true);
        let without = batch_blocks(&t1, &t2, &v1, &v2, &batch, 4, false, false);
        let cfg = LossConfig::default();
        let pc = step_loss(
            &params,
            Objective::PointContrast,
            TrainBranches::Joint,
            &with,
            &cfg,
            false,
        )
        .unwrap();
        let pc_bare = step_loss(
            &params,
            Objective::PointContrast,
            TrainBranches::Joint,
            &without,
            &cfg,
            false,
        )
        .unwrap();
        let fa = forward(&params, &with.anchors, Head::Fused).unwrap().0;
        let fp = forward(&params, &with.positives, Head::Fused).unwrap().0;
        let direct = pair_info_nce(&fa, &fp, None, &cfg).unwrap().loss / fa.rows as f64;
        assert_eq!(pc.loss, direct);
        assert_eq!(pc_bare.loss, direct);
    }
}

#[test]
fn crossmodal_inputs_never_mix_modalities() {
    let cfg = TrainConfig::from_text("objective = crossmodal\nfusion_mode = hybrid\n").unwrap();
    let fusion = cfg.effective_fusion();
    assert_eq!(fusion, FusionMode::Late);
    for seed in 0..3 {
        let (v1, v2, batch, _) = step_fixture(seed, fusion);
        for v in [&v1, &v2] {
            let t = ViewTables::new(v, fusion);
            assert!(t.point.iter().all(|r| r[3..].iter().all(|&x| x == 0.0)));
            assert!(t.pixel.iter().all(|r| r[0] == 0.0 && r[1] == 0.0 && r[5] == 0.0));
        }
        let t2 = ViewTables::new(&v2, fusion);
        let nb = Neighborhoods::compute(&v2, &batch.positive_idx, 4, true);
        let block = disturbed_block(&t2, &v2, &batch.positive_idx, &batch.disturb_map, &nb);
        assert!(block
            .point
            .unwrap()
            .extra
            .iter()
            .all(|r| r[3..].iter().all(|&x| x == 0.0)));
        assert!(block
            .pixel
            .unwrap()
            .extra
            .iter()
            .all(|r| r[0] == 0.0 && r[1] == 0.0 && r[5] == 0.0));
    }
}
