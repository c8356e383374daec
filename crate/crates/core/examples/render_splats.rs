//! Rasterizes a random Gaussian scene with the tile renderer, checks it
//! against the global-sort reference and writes the color image.
//!
//! cargo run --example render_splats -- [out.png]

use cyclesplat::gradcheck::random_scene;
use cyclesplat::io::write_rgb8_png;
use cyclesplat::raster::{rasterize, rasterize_reference};

fn main() -> cyclesplat::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "splats.png".into());
    let (set, cam, bg) = random_scene(7, 40, 96);
    let render = rasterize(&set, &cam, bg);
    let reference = rasterize_reference(&set, &cam, bg);
    println!("{} splats, max difference to reference {:.2e}", set.len(), render.max_abs_diff(&reference));
    write_rgb8_png(out.as_ref(), &render.color)?;
    println!("wrote {out}");
    Ok(())
}
