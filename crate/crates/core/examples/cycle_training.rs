//! Trains the small convolutional predictor on an occluder corpus with the
//! cycle-aggregation objective, then with aggregation off, and compares
//! hole coverage of novel views.
//!
//! cargo run --release --example cycle_training -- [steps]

use cyclesplat::fixtures::occluder_corpus;
use cyclesplat::metrics::hole_coverage;
use cyclesplat::predictor::PredictorKind;
use cyclesplat::train::{orbit_pivot, render_prediction, run_training, TrainConfig};

fn main() -> cyclesplat::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let corpus = occluder_corpus(24, 3, 1);
    for aggregation in [true, false] {
        let cfg = TrainConfig {
            predictor: PredictorKind::TinyConv,
            hidden: 8,
            steps,
            aggregation,
            ..TrainConfig::default()
        };
        let out = run_training(&corpus, &cfg)?;
        let last = out.log.last().map(|r| r.losses.weighted_total).unwrap_or(0.0);
        let mut holes = 0.0;
        for (s, input) in corpus.iter().enumerate() {
            for yaw in [-30f64, 30.0] {
                let cam = input.camera.orbit(&orbit_pivot(input), yaw.to_radians(), 0.0);
                let r = render_prediction(out.predictor.as_ref(), s, input, &cam, aggregation, 0.5, [0.0; 3])?;
                holes += hole_coverage(&r.alpha, 0.5) / (2 * corpus.len()) as f64;
            }
        }
        println!("aggregation {aggregation}: last loss {last:.4}, mean hole coverage at ±30° {holes:.4}");
    }
    Ok(())
}
