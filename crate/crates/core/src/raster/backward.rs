use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::forward::TileGrid;
use super::project::{project, project_backward, SplatGrad};
use super::{
    GradientBuffer, ProjectedGaussian, RenderGrads, SplatSample, DEPTH_EPS,
    TRANSMITTANCE_MIN,
};
use crate::camera::Camera;
use crate::error::{mismatch, Result};
use crate::gaussian::GaussianSet;
use crate::grid::Rgb;

struct Contribution {
    slot: usize,
    sample: SplatSample,
    transmittance: f64,
}

/// Reverse-mode pass through compositing, splat falloff, EWA projection,
/// covariance construction and activations.
///
/// `upstream` holds dL/d(color), dL/d(depth), dL/d(alpha) per pixel of the
/// render produced by [`rasterize`](super::rasterize) with the same inputs.
pub fn rasterize_backward(
    set: &GaussianSet,
    cam: &Camera,
    background: Rgb,
    upstream: &RenderGrads,
) -> Result<GradientBuffer> {
    let (width, height) = (cam.width, cam.height);
    if upstream.dims() != (width, height)
        || upstream.depth.dims() != (width, height)
        || upstream.alpha.dims() != (width, height)
    {
        return Err(mismatch(format!(
            "upstream gradients are {:?}, camera is {}x{}",
            upstream.dims(),
            width,
            height
        )));
    }
    let mut out = GradientBuffer::zeros(set.len());
    if upstream.is_zero() {
        return Ok(out);
    }
    let projected = project(set, cam);
    if projected.is_empty() {
        return Ok(out);
    }
    let tiles = TileGrid::build(&projected, width, height);

    let per_tile: Vec<Vec<SplatGrad>> = (0..tiles.bins.len())
        .into_par_iter()
        .map(|t| {
            let bin = &tiles.bins[t];
            let mut local = vec![SplatGrad::default(); bin.len()];
            let mut contribs = Vec::new();
            for (col, row) in tiles.tile_pixels(t, width, height) {
                backward_pixel(
                    bin,
                    &projected,
                    col,
                    row,
                    &background,
                    upstream,
                    &mut contribs,
                    &mut local,
                );
            }
            local
        })
        .collect();

    // Fixed merge order keeps the result independent of the worker count.
    let mut splat_grads = vec![SplatGrad::default(); projected.len()];
    for (t, local) in per_tile.iter().enumerate() {
        for (slot, g) in local.iter().enumerate() {
            splat_grads[tiles.bins[t][slot]].add_assign(g);
        }
    }
    for (s, g) in projected.iter().zip(&splat_grads) {
        let prim = &set.primitives()[s.index];
        out.grads[s.index] = project_backward(prim, s, cam, g);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    bin: &[usize],
    projected: &[ProjectedGaussian],
    col: usize,
    row: usize,
    background: &Rgb,
    upstream: &RenderGrads,
    contribs: &mut Vec<Contribution>,
    local: &mut [SplatGrad],
) {
    let g_color = upstream.color.get(col, row);
    let g_depth = *upstream.depth.get(col, row);
    let g_alpha = *upstream.alpha.get(col, row);
    if g_color.iter().all(|v| *v == 0.0) && g_depth == 0.0 && g_alpha == 0.0 {
        return;
    }
    let (px, py) = (col as f64, row as f64);

    // Replay the forward pass for this pixel.
    contribs.clear();
    let mut transmittance = 1.0;
    let mut alpha = 0.0;
    let mut depth_sum = 0.0;
    for (slot, &k) in bin.iter().enumerate() {
        let s = &projected[k];
        let Some(sample) = s.eval(px, py) else {
            continue;
        };
        let w = sample.alpha * transmittance;
        alpha += w;
        depth_sum += s.camera_depth * w;
        contribs.push(Contribution {
            slot,
            sample,
            transmittance,
        });
        transmittance *= 1.0 - sample.alpha;
        if transmittance < TRANSMITTANCE_MIN {
            break;
        }
    }
    if contribs.is_empty() {
        return;
    }

    // color = sum c a T + (1 - A) b;  depth = Z / (A + eps)
    let denom = alpha + DEPTH_EPS;
    let g_depth_sum = g_depth / denom;
    let g_alpha_total = g_alpha - g_depth * depth_sum / (denom * denom)
        - (g_color[0] * background[0] + g_color[1] * background[1] + g_color[2] * background[2]);

    // The loss is L = sum_k v_k a_k T_k with v_k the per-splat value.
    let mut suffix = 0.0;
    for c in contribs.iter().rev() {
        let s = &projected[bin[c.slot]];
        let a = c.sample.alpha;
        let t = c.transmittance;
        let value = g_color[0] * s.color[0]
            + g_color[1] * s.color[1]
            + g_color[2] * s.color[2]
            + g_depth_sum * s.camera_depth
            + g_alpha_total;
        let g_a = value * t - suffix / (1.0 - a);
        suffix += value * a * t;

        let g = &mut local[c.slot];
        let w = a * t;
        g.color.x += g_color[0] * w;
        g.color.y += g_color[1] * w;
        g.color.z += g_color[2] * w;
        g.depth += g_depth_sum * w;
        if !c.sample.clamped {
            g.opacity += g_a * c.sample.falloff;
            let g_power = g_a * a;
            let (dx, dy) = (c.sample.dx, c.sample.dy);
            let q = &s.conic;
            // power = -1/2 d^T Q d,  d = pixel - mean
            g.mean2d += Vector2::new(
                q[(0, 0)] * dx + q[(0, 1)] * dy,
                q[(0, 1)] * dx + q[(1, 1)] * dy,
            ) * g_power;
            g.conic += Matrix2::new(dx * dx, dx * dy, dx * dy, dy * dy) * (-0.5 * g_power);
        }
    }
}
