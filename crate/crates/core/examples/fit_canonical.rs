//! Fits per-pixel attribute tables to one scene from the canonical view
//! and prints the reconstruction PSNR as training goes.
//!
//! cargo run --release --example fit_canonical

use cyclesplat::fixtures::smooth_scene;
use cyclesplat::predictor::PredictorKind;
use cyclesplat::train::{run_stages, TrainConfig, Trainer};

fn main() -> cyclesplat::Result<()> {
    let corpus = [smooth_scene(48, 1)];
    let cfg = TrainConfig {
        predictor: PredictorKind::DirectFit,
        steps: 200,
        canonical_prob: 1.0,
        learning_rate: 0.01,
        eval_every: 50,
        eval_yaws_deg: vec![],
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::for_corpus(&corpus, cfg)?;
    run_stages(&mut trainer, &corpus, |r| {
        if let Some(p) = r.psnr_canonical {
            println!("step {:>4}: recon {:.5}, PSNR {p:.2} dB", r.step + 1, r.losses.recon.unwrap_or(f64::NAN));
        }
    })
}
