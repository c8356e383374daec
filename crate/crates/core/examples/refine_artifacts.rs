//! Geometry-guided refinement on a model with a see-through patch: counts
//! artifact pixels along the 16-view arc before and after refinement.
//!
//! cargo run --release --example refine_artifacts

use cyclesplat::aggregate::inference_aggregate;
use cyclesplat::fixtures::seeded_artifact_fixture;
use cyclesplat::refine::{sample_arc, ArcSequence, ARC_FRAMES};
use cyclesplat::train::Trainer;

fn main() -> cyclesplat::Result<()> {
    let fx = seeded_artifact_fixture(32);
    let th = fx.config.thresholds;
    let cameras = sample_arc(&fx.scene.camera, &fx.cam1, ARC_FRAMES)?;
    let mut trainer = Trainer::new(Box::new(fx.predictor), fx.config.clone())?;
    let popcount = |t: &Trainer| -> cyclesplat::Result<usize> {
        let res = inference_aggregate(&fx.scene, 0, t.predictor.as_ref(), &fx.cam1, th.tau)?;
        Ok(ArcSequence::render(&res.aggregated.merged_set, cameras.clone(), &th, [0.0; 3])?.popcount())
    };
    println!("artifact pixels before: {}", popcount(&trainer)?);
    for step in 0..fx.config.refine_steps {
        let report = trainer.refine_step(0, &fx.scene, &fx.cam1, fx.config.refine_lr_scale)?;
        if step % 25 == 0 {
            println!("step {step:>3}: video loss {:.4}", report.video.unwrap_or(0.0));
        }
    }
    println!("artifact pixels after: {}", popcount(&trainer)?);
    Ok(())
}
