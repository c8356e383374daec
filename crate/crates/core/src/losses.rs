//! Training objectives and their gradients with respect to render targets.
//!
//! Every loss has a `*_grad` companion returning the partial derivatives of
//! the scalar loss with respect to its first (rendered) argument. Absolute
//! values use the subgradient 0 at exact ties.

use crate::camera::Camera;
use crate::error::{mismatch, Error, Result};
use crate::gaussian::LossWeights;
use crate::grid::{DepthMap, Grid, ImageRgb};
use crate::lift::RgbdInput;
use crate::raster::{RenderGrads, RenderTargets, NEAR_PLANE};

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ensure_render_dims(render: &RenderTargets, target: &RgbdInput) -> Result<()> {
    render.color.ensure_dims(&target.image, "render and target image")
}

/// Mean absolute color error over all channels plus mean absolute depth
/// error over pixels whose rendered alpha exceeds `tau`.
pub fn recon_loss(render: &RenderTargets, target: &RgbdInput, tau: f64) -> Result<f64> {
    ensure_render_dims(render, target)?;
    let n = render.color.len() as f64;
    let color: f64 = render
        .color
        .iter()
        .zip(target.image.iter())
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>())
        .sum::<f64>()
        / (3.0 * n);
    let mut depth = 0.0;
    let mut solid = 0usize;
    for ((d, t), a) in render.depth.iter().zip(target.depth.iter()).zip(render.alpha.iter()) {
        if *a > tau {
            depth += (d - t).abs();
            solid += 1;
        }
    }
    let depth = if solid > 0 { depth / solid as f64 } else { 0.0 };
    Ok(color + depth)
}

/// Gradient of [`recon_loss`] with respect to the render. The depth mask is
/// treated as constant.
pub fn recon_loss_grad(render: &RenderTargets, target: &RgbdInput, tau: f64) -> Result<RenderGrads> {
    ensure_render_dims(render, target)?;
    let (w, h) = render.color.dims();
    let n = (w * h) as f64;
    let mut g = RenderGrads::zeros(w, h);
    for ((gc, a), b) in g.color.as_mut_slice().iter_mut().zip(render.color.iter()).zip(target.image.iter()) {
        for k in 0..3 {
            gc[k] = sign(a[k] - b[k]) / (3.0 * n);
        }
    }
    let solid = render.alpha.iter().filter(|a| **a > tau).count();
    if solid > 0 {
        for (((gd, d), t), a) in g
            .depth
            .as_mut_slice()
            .iter_mut()
            .zip(render.depth.iter())
            .zip(target.depth.iter())
            .zip(render.alpha.iter())
        {
            if *a > tau {
                *gd = sign(d - t) / solid as f64;
            }
        }
    }
    Ok(g)
}

/// Same formula as [`recon_loss`]; supervises the render of the aggregated
/// novel-view set back in the canonical view.
pub fn cycle_loss(render: &RenderTargets, target: &RgbdInput, tau: f64) -> Result<f64> {
    recon_loss(render, target, tau)
}

pub fn cycle_loss_grad(render: &RenderTargets, target: &RgbdInput, tau: f64) -> Result<RenderGrads> {
    recon_loss_grad(render, target, tau)
}

/// Result of [`photometric_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricLoss {
    pub value: f64,
    /// Canonical pixels whose reprojection landed inside the novel view.
    pub valid_pixels: usize,
    /// Set when no pixel reprojected inside the novel view.
    pub warning: bool,
}

struct Tap {
    source: usize,
    target: [(usize, f64); 4],
}

/// Reprojects each canonical pixel with its depth into `cam1` and returns
/// the bilinear taps of those landing inside `[0, W-1] x [0, H-1]`.
fn warp_taps(d0: &DepthMap, cam0: &Camera, cam1: &Camera) -> Vec<Tap> {
    let (w1, h1) = (cam1.width, cam1.height);
    let mut taps = Vec::new();
    for row in 0..d0.height() {
        for col in 0..d0.width() {
            let d = *d0.get(col, row);
            if !(d > 0.0) {
                continue;
            }
            let world = cam0.to_world(&cam0.unproject_unchecked(col as f64, row as f64, d));
            let p1 = cam1.to_camera(&world);
            if p1.z <= NEAR_PLANE {
                continue;
            }
            let uv = cam1.project_camera(&p1);
            let (u, v) = (uv.x, uv.y);
            if !(u >= 0.0 && u <= (w1 - 1) as f64 && v >= 0.0 && v <= (h1 - 1) as f64) {
                continue;
            }
            let x0 = (u.floor() as usize).min(w1 - 1);
            let y0 = (v.floor() as usize).min(h1 - 1);
            let x1 = (x0 + 1).min(w1 - 1);
            let y1 = (y0 + 1).min(h1 - 1);
            let fx = u - x0 as f64;
            let fy = v - y0 as f64;
            taps.push(Tap {
                source: row * d0.width() + col,
                target: [
                    (y0 * w1 + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * w1 + x1, fx * (1.0 - fy)),
                    (y1 * w1 + x0, (1.0 - fx) * fy),
                    (y1 * w1 + x1, fx * fy),
                ],
            });
        }
    }
    taps
}

fn sample(image: &ImageRgb, tap: &Tap) -> [f64; 3] {
    let mut s = [0.0; 3];
    for (i, wgt) in tap.target {
        let p = image.as_slice()[i];
        for k in 0..3 {
            s[k] += wgt * p[k];
        }
    }
    s
}

fn photometric_check(i0: &ImageRgb, d0: &DepthMap, i1: &ImageRgb, cam0: &Camera, cam1: &Camera) -> Result<()> {
    i0.ensure_dims(d0, "canonical image and depth")?;
    if i0.dims() != (cam0.width, cam0.height) {
        return Err(mismatch("canonical image does not match cam0"));
    }
    if i1.dims() != (cam1.width, cam1.height) {
        return Err(mismatch("novel image does not match cam1"));
    }
    Ok(())
}

/// Mean L1 between each canonical pixel and the novel image bilinearly
/// sampled at that pixel's reprojection. Pixels reprojecting outside the
/// novel view (or behind it) are excluded from the average.
pub fn photometric_loss(
    i0: &ImageRgb,
    d0: &DepthMap,
    i1: &ImageRgb,
    cam0: &Camera,
    cam1: &Camera,
) -> Result<PhotometricLoss> {
    photometric_check(i0, d0, i1, cam0, cam1)?;
    let taps = warp_taps(d0, cam0, cam1);
    if taps.is_empty() {
        log::warn!("photometric loss: every pixel reprojects outside the novel view");
        return Ok(PhotometricLoss {
            value: 0.0,
            valid_pixels: 0,
            warning: true,
        });
    }
    let mut total = 0.0;
    for tap in &taps {
        let s = sample(i1, tap);
        let r = i0.as_slice()[tap.source];
        total += (0..3).map(|k| (s[k] - r[k]).abs()).sum::<f64>();
    }
    Ok(PhotometricLoss {
        value: total / (3 * taps.len()) as f64,
        valid_pixels: taps.len(),
        warning: false,
    })
}

/// Gradient of [`photometric_loss`] with respect to the novel image.
pub fn photometric_loss_grad(
    i0: &ImageRgb,
    d0: &DepthMap,
    i1: &ImageRgb,
    cam0: &Camera,
    cam1: &Camera,
) -> Result<ImageRgb> {
    photometric_check(i0, d0, i1, cam0, cam1)?;
    let mut g = Grid::filled(i1.width(), i1.height(), [0.0; 3]);
    let taps = warp_taps(d0, cam0, cam1);
    if taps.is_empty() {
        return Ok(g);
    }
    let norm = 1.0 / (3 * taps.len()) as f64;
    for tap in &taps {
        let s = sample(i1, tap);
        let r = i0.as_slice()[tap.source];
        for (i, wgt) in tap.target {
            let gi = &mut g.as_mut_slice()[i];
            for k in 0..3 {
                gi[k] += norm * sign(s[k] - r[k]) * wgt;
            }
        }
    }
    Ok(g)
}

/// Stand-in for learned perceptual and semantic feature losses.
pub trait PerceptualSurrogate: Send + Sync {
    fn loss(&self, rendered: &ImageRgb, reference: &ImageRgb) -> Result<f64>;
    /// Gradient with respect to `rendered`.
    fn grad(&self, rendered: &ImageRgb, reference: &ImageRgb) -> Result<ImageRgb>;
}

/// Sum over pooling factors of the mean L1 between average-pooled images.
/// Edge blocks that do not fill a whole factor average the pixels present.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidL1 {
    pub factors: Vec<usize>,
}

impl Default for PyramidL1 {
    fn default() -> Self {
        Self {
            factors: vec![1, 2, 4, 8],
        }
    }
}

fn pool(image: &ImageRgb, f: usize) -> ImageRgb {
    let (w, h) = image.dims();
    let (pw, ph) = (w.div_ceil(f), h.div_ceil(f));
    let mut out = Grid::filled(pw, ph, [0.0; 3]);
    let mut count = Grid::filled(pw, ph, 0usize);
    for row in 0..h {
        for col in 0..w {
            let p = image.get(col, row);
            let o = out.get_mut(col / f, row / f);
            for k in 0..3 {
                o[k] += p[k];
            }
            *count.get_mut(col / f, row / f) += 1;
        }
    }
    for (o, c) in out.as_mut_slice().iter_mut().zip(count.iter()) {
        for v in o.iter_mut() {
            *v /= *c as f64;
        }
    }
    out
}

impl PerceptualSurrogate for PyramidL1 {
    fn loss(&self, rendered: &ImageRgb, reference: &ImageRgb) -> Result<f64> {
        rendered.ensure_dims(reference, "perceptual surrogate images")?;
        let mut total = 0.0;
        for &f in &self.factors {
            let (a, b) = (pool(rendered, f), pool(reference, f));
            let sum: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).abs()).sum::<f64>())
                .sum();
            total += sum / (3 * a.len()) as f64;
        }
        Ok(total)
    }

    fn grad(&self, rendered: &ImageRgb, reference: &ImageRgb) -> Result<ImageRgb> {
        rendered.ensure_dims(reference, "perceptual surrogate images")?;
        let (w, h) = rendered.dims();
        let mut g = Grid::filled(w, h, [0.0; 3]);
        for &f in &self.factors {
            let (a, b) = (pool(rendered, f), pool(reference, f));
            let norm = 1.0 / (3 * a.len()) as f64;
            for row in 0..h {
                for col in 0..w {
                    let (pc, pr) = (col / f, row / f);
                    let bw = (w.min((pc + 1) * f) - pc * f) as f64;
                    let bh = (h.min((pr + 1) * f) - pr * f) as f64;
                    let (x, y) = (a.get(pc, pr), b.get(pc, pr));
                    let gi = g.get_mut(col, row);
                    for k in 0..3 {
                        gi[k] += norm * sign(x[k] - y[k]) / (bw * bh);
                    }
                }
            }
        }
        Ok(g)
    }
}

/// [`PyramidL1`] with factors 1, 2, 4 and 8.
pub fn perceptual_surrogate(rendered: &ImageRgb, reference: &ImageRgb) -> Result<f64> {
    PyramidL1::default().loss(rendered, reference)
}

/// Anisotropic total variation: mean |forward u-difference| plus mean
/// |forward v-difference|. An axis with fewer than two samples contributes 0.
pub fn tv_loss(depth: &DepthMap) -> f64 {
    let (w, h) = depth.dims();
    let mut du = 0.0;
    let mut dv = 0.0;
    for row in 0..h {
        for col in 0..w {
            let d = *depth.get(col, row);
            if col + 1 < w {
                du += (depth.get(col + 1, row) - d).abs();
            }
            if row + 1 < h {
                dv += (depth.get(col, row + 1) - d).abs();
            }
        }
    }
    let nu = (w.saturating_sub(1) * h) as f64;
    let nv = (w * h.saturating_sub(1)) as f64;
    (if nu > 0.0 { du / nu } else { 0.0 }) + (if nv > 0.0 { dv / nv } else { 0.0 })
}

pub fn tv_loss_grad(depth: &DepthMap) -> DepthMap {
    let (w, h) = depth.dims();
    let mut g = Grid::filled(w, h, 0.0);
    let nu = (w.saturating_sub(1) * h) as f64;
    let nv = (w * h.saturating_sub(1)) as f64;
    for row in 0..h {
        for col in 0..w {
            let d = *depth.get(col, row);
            if col + 1 < w {
                let s = sign(depth.get(col + 1, row) - d) / nu;
                *g.get_mut(col + 1, row) += s;
                *g.get_mut(col, row) -= s;
            }
            if row + 1 < h {
                let s = sign(depth.get(col, row + 1) - d) / nv;
                *g.get_mut(col, row + 1) += s;
                *g.get_mut(col, row) -= s;
            }
        }
    }
    g
}

/// Which half of the objective a step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Canonical,
    Novel,
}

/// Named loss terms of one step. Absent terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub recon: Option<f64>,
    pub cycle: Option<f64>,
    pub photo: Option<f64>,
    pub perp_surrogate: Option<f64>,
    pub clip_surrogate: Option<f64>,
    pub reg: Option<f64>,
    /// `photo + lambda_perp * perp + lambda_clip * clip`.
    pub novel: Option<f64>,
    pub video: Option<f64>,
    pub weighted_total: f64,
    /// No canonical pixel reprojected into the novel view.
    #[serde(default)]
    pub photo_warning: bool,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.recon,
            self.cycle,
            self.photo,
            self.perp_surrogate,
            self.clip_surrogate,
            self.reg,
            self.novel,
            self.video,
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
            && self.weighted_total.is_finite()
    }
}

fn require(term: Option<f64>, name: &'static str) -> Result<f64> {
    term.ok_or(Error::MissingTerm(name))
}

/// Canonical: `recon + lambda_reg * reg`.
/// Novel: `cycle + lambda_reg * reg + lambda_novel * (photo + lambda_perp * perp + lambda_clip * clip)`.
///
/// A novel-branch report without a cycle term (the no-aggregation
/// baseline) is rejected; use [`baseline_total`] for it. A present `video`
/// term is added with unit weight.
pub fn total_loss(branch: Branch, terms: &LossReport, w: &LossWeights) -> Result<f64> {
    let video = terms.video.unwrap_or(0.0);
    match branch {
        Branch::Canonical => Ok(require(terms.recon, "recon")? + w.lambda_reg * require(terms.reg, "reg")? + video),
        Branch::Novel => Ok(require(terms.cycle, "cycle")?
            + w.lambda_reg * require(terms.reg, "reg")?
            + w.lambda_novel * novel_term(terms, w)?
            + video),
    }
}

/// `photo + lambda_perp * perp + lambda_clip * clip`.
pub fn novel_term(terms: &LossReport, w: &LossWeights) -> Result<f64> {
    Ok(require(terms.photo, "photo")?
        + w.lambda_perp * require(terms.perp_surrogate, "perp_surrogate")?
        + w.lambda_clip * require(terms.clip_surrogate, "clip_surrogate")?)
}

/// Novel branch without cycle supervision: `lambda_reg * reg + lambda_novel * novel`.
pub fn baseline_total(terms: &LossReport, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda_reg * require(terms.reg, "reg")? + w.lambda_novel * novel_term(terms, w)?)
}

/// Wraps a render that later stages consume as a constant input. Its
/// backward pass discards every upstream gradient, so nothing reaches the
/// primitives that produced it.
#[derive(Clone, Debug)]
pub struct StopGradBoundary {
    render: RenderTargets,
}

impl StopGradBoundary {
    pub fn new(render: RenderTargets) -> Self {
        Self { render }
    }

    pub fn render(&self) -> &RenderTargets {
        &self.render
    }

    pub fn into_inner(self) -> RenderTargets {
        self.render
    }

    pub fn backward(&self, upstream: &RenderGrads) -> RenderGrads {
        let (w, h) = upstream.dims();
        RenderGrads::zeros(w, h)
    }
}
