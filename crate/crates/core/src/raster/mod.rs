//! Differentiable EWA splatting rasterizer.
//!
//! The forward pass bins projected splats into 16x16 tiles, sorts each
//! tile front to back and alpha-composites color, expected depth and
//! accumulated alpha. [`rasterize_reference`] evaluates the same per-pixel
//! math with one global sort and no binning, and [`rasterize_backward`]
//! returns analytic gradients with respect to every raw primitive
//! parameter.

mod backward;
mod forward;
mod normals;
mod project;

use nalgebra::{Matrix2, Vector2, Vector3, Vector4};

use crate::grid::{DepthMap, Grid, ImageRgb, Rgb};

pub use backward::rasterize_backward;
pub use forward::{rasterize, rasterize_reference};
pub use normals::{normals_from_depth, view_directions};
pub use project::project;

/// Isotropic screen-space dilation added to every projected covariance (px²).
pub const LOW_PASS: f64 = 0.3;
/// Per-splat alpha cap.
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Primitives at or closer than this camera depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Splat support radius in standard deviations. Contributions beyond it are
/// below 3e-11 of the splat opacity.
pub const SUPPORT_SIGMAS: f64 = 7.0;
/// Tile edge in pixels.
pub const TILE_SIZE: usize = 16;
/// Added to the accumulated alpha when normalizing expected depth.
pub const DEPTH_EPS: f64 = 1e-8;

const SUPPORT_POWER: f64 = 0.5 * SUPPORT_SIGMAS * SUPPORT_SIGMAS;

/// A primitive after EWA projection into one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Index of the source primitive in the rendered set.
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub camera_depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Half extent of the axis-aligned box enclosing the splat support (px).
    pub radius: f64,
}

impl ProjectedGaussian {
    /// Splat alpha at pixel `(px, py)` together with the unclamped
    /// `opacity * G` and the Gaussian falloff `G`. `None` outside the
    /// support ellipse.
    #[inline]
    pub(crate) fn eval(&self, px: f64, py: f64) -> Option<SplatSample> {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let q = &self.conic;
        let power =
            -0.5 * (q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy);
        if power < -SUPPORT_POWER {
            return None;
        }
        let falloff = power.exp();
        let raw = self.opacity * falloff;
        Some(SplatSample {
            dx,
            dy,
            falloff,
            alpha: raw.min(ALPHA_MAX),
            clamped: raw > ALPHA_MAX,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SplatSample {
    pub dx: f64,
    pub dy: f64,
    pub falloff: f64,
    pub alpha: f64,
    pub clamped: bool,
}

/// Color, expected depth and accumulated alpha of one rasterization pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderTargets {
    pub color: ImageRgb,
    pub depth: DepthMap,
    pub alpha: DepthMap,
}

impl RenderTargets {
    pub fn background(width: usize, height: usize, background: Rgb) -> Self {
        Self {
            color: Grid::filled(width, height, background),
            depth: Grid::filled(width, height, 0.0),
            alpha: Grid::filled(width, height, 0.0),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    /// Largest absolute per-channel difference across all three targets.
    pub fn max_abs_diff(&self, other: &RenderTargets) -> f64 {
        let mut m: f64 = 0.0;
        for (a, b) in self.color.iter().zip(other.color.iter()) {
            for c in 0..3 {
                m = m.max((a[c] - b[c]).abs());
            }
        }
        for (a, b) in self.depth.iter().zip(other.depth.iter()) {
            m = m.max((a - b).abs());
        }
        for (a, b) in self.alpha.iter().zip(other.alpha.iter()) {
            m = m.max((a - b).abs());
        }
        m
    }
}

/// Per-pixel partial derivatives of a scalar loss with respect to the
/// render targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub color: ImageRgb,
    pub depth: DepthMap,
    pub alpha: DepthMap,
}

impl RenderGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Grid::filled(width, height, [0.0; 3]),
            depth: Grid::filled(width, height, 0.0),
            alpha: Grid::filled(width, height, 0.0),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.color.dims()
    }

    pub fn add_assign(&mut self, other: &RenderGrads) {
        for (a, b) in self.color.as_mut_slice().iter_mut().zip(other.color.iter()) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
        for (a, b) in self.depth.as_mut_slice().iter_mut().zip(other.depth.iter()) {
            *a += b;
        }
        for (a, b) in self.alpha.as_mut_slice().iter_mut().zip(other.alpha.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.color.as_mut_slice() {
            for c in a.iter_mut() {
                *c *= s;
            }
        }
        for a in self.depth.as_mut_slice() {
            *a *= s;
        }
        for a in self.alpha.as_mut_slice() {
            *a *= s;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.color.iter().all(|c| c.iter().all(|v| *v == 0.0))
            && self.depth.iter().all(|v| *v == 0.0)
            && self.alpha.iter().all(|v| *v == 0.0)
    }
}

/// Gradient of a scalar loss with respect to one primitive's raw parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity_raw: f64,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
}

impl PrimitiveGrad {
    pub fn add_assign(&mut self, other: &PrimitiveGrad) {
        self.position += other.position;
        self.color += other.color;
        self.opacity_raw += other.opacity_raw;
        self.log_scale += other.log_scale;
        self.rotation += other.rotation;
    }

    pub fn to_params(&self) -> [f64; 14] {
        let mut out = [0.0; 14];
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3..6].copy_from_slice(self.color.as_slice());
        out[6] = self.opacity_raw;
        out[7..10].copy_from_slice(self.log_scale.as_slice());
        out[10..14].copy_from_slice(self.rotation.as_slice());
        out
    }

    pub fn is_zero(&self) -> bool {
        self.to_params().iter().all(|v| *v == 0.0)
    }
}

/// Per-primitive gradients, aligned with the rendered set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientBuffer {
    pub grads: Vec<PrimitiveGrad>,
}

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self {
            grads: vec![PrimitiveGrad::default(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        assert_eq!(self.len(), other.len(), "gradient buffers differ in length");
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(PrimitiveGrad::is_zero)
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .all(|g| g.to_params().iter().all(|v| v.is_finite()))
    }
}
