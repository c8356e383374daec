//! Push-pull video in-painting of a masked disk moving over a gradient.
//!
//! cargo run --example inpaint_sequence

use cyclesplat::aggregate::BinaryMask;
use cyclesplat::grid::Grid;
use cyclesplat::refine::inpaint_sequence;

fn main() -> cyclesplat::Result<()> {
    let (w, h) = (48, 32);
    let truth = Grid::from_fn(w, h, |c, r| [c as f64 / w as f64, r as f64 / h as f64, 0.5]);
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    for k in 0..16 {
        let (cx, cy) = (10.0 + 1.5 * k as f64, 16.0);
        let mask = Grid::from_fn(w, h, |c, r| (c as f64 - cx).hypot(r as f64 - cy) < 5.0);
        frames.push(Grid::from_fn(w, h, |c, r| if *mask.get(c, r) { [0.0; 3] } else { *truth.get(c, r) }));
        masks.push(BinaryMask::new(mask, 0));
    }
    let out = inpaint_sequence(&frames, &masks)?;
    for (k, (f, m)) in out.frames.iter().zip(&masks).enumerate().step_by(5) {
        let mut err = 0.0;
        for r in 0..h {
            for c in 0..w {
                if m.get(c, r) {
                    err += (0..3).map(|i| (f.get(c, r)[i] - truth.get(c, r)[i]).abs()).sum::<f64>() / 3.0;
                }
            }
        }
        println!("frame {k:>2}: {} masked pixels, mean fill error {:.4}", m.count(), err / m.count() as f64);
    }
    Ok(())
}
