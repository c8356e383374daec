//! Complementary aggregation: lifts a render of the canonical set from a
//! novel camera and transfers its primitives into the canonical set's
//! holes.
//!
//! cargo run --example aggregate_views

use cyclesplat::aggregate::inference_aggregate;
use cyclesplat::fixtures::occluder_scene;
use cyclesplat::metrics::hole_coverage;
use cyclesplat::predictor::InitialMaps;
use cyclesplat::raster::rasterize;
use cyclesplat::train::orbit_pivot;

fn main() -> cyclesplat::Result<()> {
    let scene = occluder_scene(64);
    for yaw in [10.0f64, 20.0, 30.0] {
        let cam = scene.camera.orbit(&orbit_pivot(&scene), yaw.to_radians(), 0.0);
        let res = inference_aggregate(&scene, 0, &InitialMaps, &cam, 0.5)?;
        let before = hole_coverage(&rasterize(&res.gs0, &cam, [0.0; 3]).alpha, 0.5);
        let after = hole_coverage(&rasterize(&res.aggregated.merged_set, &cam, [0.0; 3]).alpha, 0.5);
        println!(
            "yaw {yaw:>4.1}°: {} donors, hole coverage {before:.4} -> {after:.4}",
            res.aggregated.donor_count
        );
    }
    Ok(())
}
