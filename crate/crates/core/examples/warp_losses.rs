//! Photometric reprojection, perceptual surrogate and depth smoothness on a
//! render of the occluder scene from a rotated camera.
//!
//! cargo run --example warp_losses

use cyclesplat::fixtures::occluder_scene;
use cyclesplat::lift::{lift_pixel_aligned, AttributeMaps};
use cyclesplat::losses::{perceptual_surrogate, photometric_loss, tv_loss};
use cyclesplat::raster::rasterize;
use cyclesplat::train::orbit_pivot;

fn main() -> cyclesplat::Result<()> {
    let scene = occluder_scene(48);
    let set = lift_pixel_aligned(&scene, &AttributeMaps::initial(&scene), scene.default_clamp_offset(), 0)?;
    for yaw in [0.0f64, 10.0, 20.0] {
        let cam = scene.camera.orbit(&orbit_pivot(&scene), yaw.to_radians(), 0.0);
        let r = rasterize(&set, &cam, [0.0; 3]);
        let photo = photometric_loss(&scene.image, &scene.depth, &r.color, &scene.camera, &cam)?;
        println!(
            "yaw {yaw:>4.1}°: photometric {:.4} over {} pixels, surrogate vs input {:.4}, depth TV {:.4}",
            photo.value,
            photo.valid_pixels,
            perceptual_surrogate(&r.color, &scene.image)?,
            tv_loss(&r.depth)
        );
    }
    Ok(())
}
