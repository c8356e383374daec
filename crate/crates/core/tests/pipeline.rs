//! Cross-module behavior on the synthetic fixtures.

use cyclesplat::aggregate::{aggregate_pair, inference_aggregate};
use cyclesplat::fixtures::{occluder_scene, seeded_artifact_fixture, smooth_scene};
use cyclesplat::gradcheck::random_scene;
use cyclesplat::lift::{lift_pixel_aligned, AttributeMaps, RgbdInput};
use cyclesplat::losses::{photometric_loss, recon_loss};
use cyclesplat::metrics::hole_coverage;
use cyclesplat::predictor::{InitialMaps, PredictorKind};
use cyclesplat::raster::{rasterize, rasterize_reference};
use cyclesplat::train::{orbit_pivot, CameraSampler, TrainConfig, Trainer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lift(input: &RgbdInput) -> cyclesplat::gaussian::GaussianSet {
    lift_pixel_aligned(input, &AttributeMaps::initial(input), input.default_clamp_offset(), 0).unwrap()
}

#[test]
fn donors_fill_disocclusions_of_the_occluder() {
    let scene = occluder_scene(48);
    let cam1 = scene.camera.orbit(&orbit_pivot(&scene), 30f64.to_radians(), 0.0);
    let gs0 = lift(&scene);
    let r01 = rasterize(&gs0, &cam1, [0.0; 3]);
    let input1 = RgbdInput::from_render(&r01, &cam1, 0.5).unwrap().unwrap();
    let gs1 = lift_pixel_aligned(&input1, &AttributeMaps::initial(&input1), input1.default_clamp_offset(), 1).unwrap();
    let r11 = rasterize(&gs1, &cam1, [0.0; 3]);
    let (out0, _) = aggregate_pair(&gs0, &gs1, &scene.camera, &cam1, 0.5).unwrap();
    let merged = rasterize(&out0.merged_set, &cam1, [0.0; 3]);
    let (mut count, mut alpha) = (0usize, 0.0);
    for r in 0..48 {
        for c in 0..48 {
            let hole_covered = *r01.alpha.get(c, r) < 0.5 && *r11.alpha.get(c, r) >= 0.5;
            assert_eq!(out0.masks.0.get(c, r), hole_covered, "pixel ({c},{r})");
            if hole_covered {
                count += 1;
                alpha += merged.alpha.get(c, r);
            }
        }
    }
    assert!(count > 0);
    assert!(alpha / count as f64 > 0.5, "mean alpha {}", alpha / count as f64);
    assert_eq!(out0.donor_count, count);
}

#[test]
fn aggregation_at_the_canonical_camera_changes_little() {
    let scene = smooth_scene(32, 4);
    let res = inference_aggregate(&scene, 0, &InitialMaps, &scene.camera, 0.5).unwrap();
    let a = rasterize(&res.gs0, &scene.camera, [0.0; 3]).color;
    let b = rasterize(&res.aggregated.merged_set, &scene.camera, [0.0; 3]).color;
    let mean: f64 = a.iter().zip(b.iter()).map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).abs()).sum::<f64>()).sum::<f64>()
        / (3 * a.len()) as f64;
    assert!(mean < 3.0 / 255.0, "mean difference {mean}");
}

#[test]
fn aggregation_lowers_hole_coverage() {
    let scene = occluder_scene(32);
    let cam1 = scene.camera.orbit(&orbit_pivot(&scene), 0.52, 0.0);
    let res = inference_aggregate(&scene, 0, &InitialMaps, &cam1, 0.5).unwrap();
    let before = hole_coverage(&rasterize(&res.gs0, &cam1, [0.0; 3]).alpha, 0.5);
    let after = hole_coverage(&rasterize(&res.aggregated.merged_set, &cam1, [0.0; 3]).alpha, 0.5);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn photometric_loss_is_small_between_renders_of_one_scene() {
    // splats half a pixel footprint wide tile the surface without the
    // front-most bias of the wider initial splats, so this set is a
    // faithful model of the scene from both cameras
    let scene = smooth_scene(48, 2);
    let mut maps = AttributeMaps::initial(&scene);
    for s in maps.log_scale.as_mut_slice() {
        *s = s.add_scalar((1.0f64 / 3.0).ln());
    }
    let set = lift_pixel_aligned(&scene, &maps, scene.default_clamp_offset(), 0).unwrap();
    let cam1 = scene.camera.orbit(&orbit_pivot(&scene), 10f64.to_radians(), 0.0);
    let r0 = rasterize(&set, &scene.camera, [0.0; 3]);
    let r1 = rasterize(&set, &cam1, [0.0; 3]);
    let loss = photometric_loss(&r0.color, &r0.depth, &r1.color, &scene.camera, &cam1).unwrap();
    assert!(loss.value < 2.0 / 255.0, "loss {}", loss.value);
}

/// Standard deviation of a unit normal truncated to [-2, 2], by midpoint
/// quadrature.
fn truncated_std() -> f64 {
    let n = 200_000;
    let (mut mass, mut second) = (0.0, 0.0);
    for i in 0..n {
        let x = -2.0 + 4.0 * (i as f64 + 0.5) / n as f64;
        let p = (-0.5 * x * x).exp();
        mass += p;
        second += x * x * p;
    }
    (second / mass).sqrt()
}

#[test]
fn sampled_angles_match_truncated_moments() {
    let sampler = CameraSampler {
        yaw_spread: 0.3,
        pitch_spread: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let samples: Vec<(f64, f64)> = (0..10_000).map(|_| sampler.sample_angles(&mut rng)).collect();
    let std = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let m = samples.iter().map(f).sum::<f64>() / samples.len() as f64;
        (samples.iter().map(|s| (f(s) - m).powi(2)).sum::<f64>() / samples.len() as f64).sqrt()
    };
    let k = truncated_std();
    let (sy, sp) = (std(&|s| s.0), std(&|s| s.1));
    assert!((sy / (0.3 * k) - 1.0).abs() < 0.1, "yaw std {sy}");
    assert!((sp / (0.1 * k) - 1.0).abs() < 0.1, "pitch std {sp}");
    assert!(samples.iter().all(|s| s.0.abs() <= 0.6 && s.1.abs() <= 0.2));
}

#[test]
fn direct_fit_starts_close_to_the_input() {
    let corpus = [smooth_scene(64, 5)];
    let cfg = TrainConfig {
        predictor: PredictorKind::DirectFit,
        ..TrainConfig::default()
    };
    let trainer = Trainer::for_corpus(&corpus, cfg).unwrap();
    let g = trainer.canonical_gradients(0, &corpus[0]).unwrap();
    assert!(g.report.recon.unwrap() < 0.05, "{:?}", g.report);
    let set = lift(&corpus[0]);
    let direct = recon_loss(&rasterize(&set, &corpus[0].camera, [0.0; 3]), &corpus[0], 0.5).unwrap();
    assert!((direct - g.report.recon.unwrap()).abs() < 1e-12);
}

#[test]
fn cycle_at_the_canonical_camera_behaves_like_reconstruction() {
    let corpus = [smooth_scene(24, 6)];
    let cfg = TrainConfig {
        predictor: PredictorKind::TinyConv,
        hidden: 4,
        yaw_spread: 0.0,
        pitch_spread: 0.0,
        ..TrainConfig::default()
    };
    let trainer = Trainer::for_corpus(&corpus, cfg).unwrap();
    let cam0 = corpus[0].camera;
    let fwd = trainer.cycle_forward(0, &corpus[0], &cam0).unwrap();
    assert_eq!(*fwd.boundary.render(), rasterize(fwd.gs0(), &cam0, [0.0; 3]));
    let cycle = trainer.cycle_gradients(0, &corpus[0], &cam0, false).unwrap();
    let canonical = trainer.canonical_gradients(0, &corpus[0]).unwrap();
    assert!(cycle.report.is_finite() && cycle.params.iter().all(|g| g.is_finite()));
    let (a, b) = (cycle.report.cycle.unwrap(), canonical.report.recon.unwrap());
    assert!(a <= 2.0 * b, "cycle {a} recon {b}");
}

#[test]
fn refinement_lowers_video_loss_on_seeded_artifacts() {
    let fx = seeded_artifact_fixture(32);
    let mut trainer = Trainer::new(Box::new(fx.predictor), fx.config.clone()).unwrap();
    let video: Vec<f64> = (0..50)
        .map(|_| {
            trainer
                .refine_step(0, &fx.scene, &fx.cam1, fx.config.refine_lr_scale)
                .unwrap()
                .video
                .unwrap()
        })
        .collect();
    assert!(video[0] > 0.0);
    assert!(video[49] < video[0], "{video:?}");
    let rises = video.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 5, "{rises} rises: {video:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn tile_renderer_matches_reference(seed in 0u64..100_000) {
        let (set, cam, bg) = random_scene(seed, 20, 48);
        prop_assert!(rasterize(&set, &cam, bg).max_abs_diff(&rasterize_reference(&set, &cam, bg)) < 1e-5);
    }
}
