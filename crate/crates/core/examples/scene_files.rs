//! Writes a synthetic scene as 16-bit PNGs with a manifest, loads it back
//! and saves a checkpoint of a fresh predictor.
//!
//! cargo run --example scene_files -- [out_dir]

use std::path::PathBuf;

use cyclesplat::fixtures::occluder_scene;
use cyclesplat::io::{read_checkpoint, save_scene, write_checkpoint, SceneManifest};
use cyclesplat::predictor::TinyConv;
use cyclesplat::train::TrainConfig;

fn main() -> cyclesplat::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "scene_files".into()));
    std::fs::create_dir_all(&dir)?;
    let scene = occluder_scene(32);
    let entry = save_scene(&dir, "occluder", &scene, 0.001)?;
    let manifest = SceneManifest { scenes: vec![entry] };
    manifest.save(&dir.join("scenes.toml"))?;
    let (loaded, base) = SceneManifest::load(&dir.join("scenes.toml"))?;
    let back = loaded.load_all(&base)?;
    let max_err = back[0]
        .image
        .iter()
        .zip(scene.image.iter())
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
        .fold(0.0f64, f64::max);
    println!("reloaded {}x{} scene, max color quantization error {max_err:.2e}", back[0].width(), back[0].height());
    let ckpt = dir.join("fresh.ckpt");
    write_checkpoint(&ckpt, &TinyConv::new(8, 0)?, &TrainConfig::default())?;
    let (pred, cfg) = read_checkpoint(&ckpt)?;
    println!("checkpoint holds {} parameters of {}, {} steps configured", pred.params().len(), pred.kind().name(), cfg.steps);
    Ok(())
}
