use cyclesplat::gradcheck::{check_raster_gradients, random_scene, GROUP_NAMES};

#[test]
fn raster_backward_matches_finite_differences() {
    for seed in 0..3 {
        let (set, cam, bg) = random_scene(seed, 30, 64);
        let report = check_raster_gradients(&set, &cam, bg, seed).unwrap();
        for (name, g) in GROUP_NAMES.iter().zip(&report.groups) {
            println!("seed {seed} {name}: {} checked, {} failed, max rel {:.2e}", g.checked, g.failed, g.max_rel_error);
        }
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}
