//! Compares analytic rasterizer gradients with central finite differences
//! on a few random scenes.
//!
//! cargo run --release --example gradient_check -- [seed]

use cyclesplat::gradcheck::{run_suite, GROUP_NAMES};

fn main() -> cyclesplat::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let report = run_suite(seed, 4, 20, 48)?;
    for (name, g) in GROUP_NAMES.iter().zip(&report.groups) {
        println!("{name:>10}: {:>5} checked, {} failed, max relative error {:.2e}", g.checked, g.failed, g.max_rel_error);
    }
    Ok(())
}
