//! Central finite-difference checks of the analytic gradients.
//!
//! Every check evaluates the forward pass only; the reference derivatives
//! never touch the backward code they validate.

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::{orbit_rotation, Camera, Intrinsics, RigidTransform};
use crate::gaussian::{GaussianPrimitive, GaussianSet};
use crate::grid::{Grid, Rgb};
use crate::raster::{rasterize, rasterize_backward, RenderGrads, RenderTargets};
use crate::Result;

/// Finite-difference step on raw parameters.
pub const FD_STEP: f64 = 1e-4;
/// Maximum accepted relative error.
pub const REL_TOL: f64 = 1e-3;
/// Coordinates with a smaller analytic magnitude are not compared.
pub const MIN_MAGNITUDE: f64 = 1e-6;
/// Depth is only weighted where the unperturbed alpha exceeds this; expected
/// depth is ill-conditioned where almost nothing covers the pixel.
pub const DEPTH_ALPHA_FLOOR: f64 = 0.05;

pub const GROUP_NAMES: [&str; 5] = ["position", "color", "opacity", "log_scale", "rotation"];

/// Index range of each attribute group in the 14 raw parameters.
pub fn group_of(param: usize) -> usize {
    match param {
        0..=2 => 0,
        3..=5 => 1,
        6 => 2,
        7..=9 => 3,
        _ => 4,
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GroupStats {
    pub checked: usize,
    pub failed: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub groups: [GroupStats; 5],
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.failed == 0 && g.checked > 0)
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            a.checked += b.checked;
            a.failed += b.failed;
            a.max_rel_error = a.max_rel_error.max(b.max_rel_error);
        }
    }

    pub fn record(&mut self, group: usize, analytic: f64, numeric: f64) {
        if analytic.abs() <= MIN_MAGNITUDE {
            return;
        }
        let rel = relative_error(analytic, numeric);
        let g = &mut self.groups[group];
        g.checked += 1;
        g.max_rel_error = g.max_rel_error.max(rel);
        if !(rel < REL_TOL) {
            g.failed += 1;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
}

/// A scene for gradient checks: primitives kept below the alpha cap and
/// sparse enough that compositing never hits the transmittance cutoff.
pub fn random_scene(seed: u64, count: usize, size: usize) -> (GaussianSet, Camera, Rgb) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = size as f64;
    let cam = Camera::new(
        Intrinsics {
            fx: focal,
            fy: focal * 1.05,
            cx: (size as f64 - 1.0) / 2.0 + 0.37,
            cy: (size as f64 - 1.0) / 2.0 - 0.21,
        },
        size,
        size,
        RigidTransform {
            rotation: orbit_rotation(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            translation: Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ),
        },
    )
    .expect("valid camera");
    let mut prims = Vec::with_capacity(count);
    while prims.len() < count {
        let z = rng.random_range(2.0..5.0);
        let p_cam = Vector3::new(
            rng.random_range(-0.4..0.4) * z,
            rng.random_range(-0.4..0.4) * z,
            z,
        );
        let s = rng.random_range(0.02f64..0.08).ln();
        prims.push(GaussianPrimitive {
            position: cam.to_world(&p_cam),
            color: Vector3::new(rng.random(), rng.random(), rng.random()),
            opacity_raw: rng.random_range(-2.0..0.0),
            log_scale: Vector3::new(
                s + rng.random_range(-0.4..0.4),
                s + rng.random_range(-0.4..0.4),
                s + rng.random_range(-0.4..0.4),
            ),
            rotation: Vector4::new(
                rng.random_range(0.3..1.0),
                rng.random_range(-0.7..0.7),
                rng.random_range(-0.7..0.7),
                rng.random_range(-0.7..0.7),
            ),
        });
    }
    let background = [rng.random(), rng.random(), rng.random()];
    (GaussianSet::from_primitives(0, prims), cam, background)
}

/// Random upstream weights; depth weights are masked to solid pixels of
/// `render`.
pub fn random_upstream(seed: u64, render: &RenderTargets) -> RenderGrads {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (w, h) = render.color.dims();
    let mut g = RenderGrads::zeros(w, h);
    g.color = Grid::from_fn(w, h, |_, _| {
        [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]
    });
    g.depth = Grid::from_fn(w, h, |c, r| {
        let v: f64 = rng.random_range(-1.0..1.0);
        if *render.alpha.get(c, r) > DEPTH_ALPHA_FLOOR {
            v
        } else {
            0.0
        }
    });
    g.alpha = Grid::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0));
    g
}

/// `<upstream, render>` summed over all pixels and targets.
pub fn linear_loss(render: &RenderTargets, upstream: &RenderGrads) -> f64 {
    let mut total = 0.0;
    for (c, g) in render.color.iter().zip(upstream.color.iter()) {
        total += c[0] * g[0] + c[1] * g[1] + c[2] * g[2];
    }
    for (d, g) in render.depth.iter().zip(upstream.depth.iter()) {
        total += d * g;
    }
    for (a, g) in render.alpha.iter().zip(upstream.alpha.iter()) {
        total += a * g;
    }
    total
}

/// Compares [`rasterize_backward`] with central differences of a random
/// linear functional of the render on every raw parameter.
pub fn check_raster_gradients(set: &GaussianSet, cam: &Camera, background: Rgb, seed: u64) -> Result<GradCheckReport> {
    let base = rasterize(set, cam, background);
    let upstream = random_upstream(seed, &base);
    let analytic = rasterize_backward(set, cam, background, &upstream)?;
    let mut report = GradCheckReport::default();
    let mut work = set.clone();
    for i in 0..set.len() {
        let params = set.primitives()[i].to_params();
        let grads = analytic.grads[i].to_params();
        for k in 0..GaussianPrimitive::PARAM_COUNT {
            let mut eval = |delta: f64| {
                let mut p = params;
                p[k] += delta;
                work.primitives_mut()[i] = GaussianPrimitive::from_params(&p);
                linear_loss(&rasterize(&work, cam, background), &upstream)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            work.primitives_mut()[i] = set.primitives()[i];
            report.record(group_of(k), grads[k], numeric);
        }
    }
    Ok(report)
}

/// The acceptance gradient suite: `scenes` random scenes of up to
/// `max_primitives` primitives at `size x size`.
pub fn run_suite(seed: u64, scenes: usize, max_primitives: usize, size: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheckReport::default();
    for _ in 0..scenes {
        let scene_seed: u64 = rng.random();
        let count = rng.random_range(1..=max_primitives);
        let (set, cam, bg) = random_scene(scene_seed, count, size);
        total.merge(&check_raster_gradients(&set, &cam, bg, scene_seed)?);
    }
    Ok(total)
}
