//! Lifts the occluder scene to one Gaussian per pixel and renders it from
//! a few yaw angles, reporting how much of each view is left uncovered.
//!
//! cargo run --example lift_and_orbit -- [out_dir]

use std::path::PathBuf;

use cyclesplat::fixtures::occluder_scene;
use cyclesplat::io::write_rgb8_png;
use cyclesplat::lift::{lift_pixel_aligned, AttributeMaps};
use cyclesplat::metrics::hole_coverage;
use cyclesplat::raster::rasterize;
use cyclesplat::train::orbit_pivot;

fn main() -> cyclesplat::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "orbit".into()));
    std::fs::create_dir_all(&out)?;
    let scene = occluder_scene(64);
    let set = lift_pixel_aligned(&scene, &AttributeMaps::initial(&scene), scene.default_clamp_offset(), 0)?;
    let pivot = orbit_pivot(&scene);
    for (i, yaw) in [-30.0f64, -15.0, 0.0, 15.0, 30.0].iter().enumerate() {
        let cam = scene.camera.orbit(&pivot, yaw.to_radians(), 0.0);
        let r = rasterize(&set, &cam, [0.0; 3]);
        println!("yaw {yaw:>5.1}°: hole coverage {:.3}", hole_coverage(&r.alpha, 0.5));
        write_rgb8_png(&out.join(format!("view_{i}.png")), &r.color)?;
    }
    Ok(())
}
