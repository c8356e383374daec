//! Gaussian primitives, provenance-tagged sets, activations and the
//! scale/rotation covariance construction.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One anisotropic 3D Gaussian in raw (pre-activation) parameterization.
///
/// Rotation is a quaternion stored as `(w, x, y, z)`; it is normalized on
/// every use, so any non-zero 4-vector is valid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity_raw: f64,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
}

impl GaussianPrimitive {
    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.opacity_raw.is_finite()
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
    }

    /// Number of raw scalar parameters per primitive.
    pub const PARAM_COUNT: usize = 14;

    /// Flattens raw parameters as `position, color, opacity, log_scale, rotation`.
    pub fn to_params(&self) -> [f64; Self::PARAM_COUNT] {
        let mut out = [0.0; Self::PARAM_COUNT];
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3..6].copy_from_slice(self.color.as_slice());
        out[6] = self.opacity_raw;
        out[7..10].copy_from_slice(self.log_scale.as_slice());
        out[10..14].copy_from_slice(self.rotation.as_slice());
        out
    }

    pub fn from_params(p: &[f64; Self::PARAM_COUNT]) -> Self {
        Self {
            position: Vector3::new(p[0], p[1], p[2]),
            color: Vector3::new(p[3], p[4], p[5]),
            opacity_raw: p[6],
            log_scale: Vector3::new(p[7], p[8], p[9]),
            rotation: Vector4::new(p[10], p[11], p[12], p[13]),
        }
    }
}

/// Where a primitive came from: the view it was lifted from and its pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub view: u32,
    pub row: u32,
    pub col: u32,
}

/// Ordered primitives with one provenance tag each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    primitives: Vec<GaussianPrimitive>,
    provenance: Vec<Provenance>,
}

impl GaussianSet {
    pub fn new(primitives: Vec<GaussianPrimitive>, provenance: Vec<Provenance>) -> Result<Self> {
        if primitives.len() != provenance.len() {
            return Err(invalid(format!(
                "{} primitives but {} provenance tags",
                primitives.len(),
                provenance.len()
            )));
        }
        Ok(Self {
            primitives,
            provenance,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a set whose provenance is synthetic (view `view`, row 0, col = index).
    pub fn from_primitives(view: u32, primitives: Vec<GaussianPrimitive>) -> Self {
        let provenance = (0..primitives.len() as u32)
            .map(|col| Provenance { view, row: 0, col })
            .collect();
        Self {
            primitives,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn primitives_mut(&mut self) -> &mut [GaussianPrimitive] {
        &mut self.primitives
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GaussianPrimitive, &Provenance)> {
        self.primitives.iter().zip(self.provenance.iter())
    }

    /// True when the set holds exactly one primitive per pixel of a
    /// `width x height` grid of `view`, in row-major order.
    pub fn is_pixel_aligned(&self, view: u32, width: usize, height: usize) -> bool {
        self.len() == width * height
            && self.provenance.iter().enumerate().all(|(i, p)| {
                p.view == view && p.row as usize == i / width && p.col as usize == i % width
            })
    }

    pub(crate) fn push(&mut self, primitive: GaussianPrimitive, provenance: Provenance) {
        self.primitives.push(primitive);
        self.provenance.push(provenance);
    }
}

/// Binarization and artifact thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Alpha below this marks a hole.
    pub tau: f64,
    /// Artifact angle threshold in radians.
    pub tau_theta: f64,
    /// Alpha below this is an artifact candidate.
    pub tau_artifact: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau: 0.5,
            tau_theta: 15f64.to_radians(),
            tau_artifact: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.tau) && self.tau < 1.0) {
            return Err(invalid(format!("tau must lie in (0,1), got {}", self.tau)));
        }
        if !ok(self.tau_theta) {
            return Err(invalid(format!("tau_theta must be > 0, got {}", self.tau_theta)));
        }
        if !(ok(self.tau_artifact) && self.tau_artifact < 1.0) {
            return Err(invalid(format!(
                "tau_artifact must lie in (0,1), got {}",
                self.tau_artifact
            )));
        }
        Ok(())
    }
}

/// Weights of the composite training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_novel: f64,
    pub lambda_perp: f64,
    pub lambda_clip: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reg: 0.05,
            lambda_novel: 1.0,
            lambda_perp: 0.5,
            lambda_clip: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("lambda_novel", self.lambda_novel),
            ("lambda_perp", self.lambda_perp),
            ("lambda_clip", self.lambda_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Activated opacity and per-axis standard deviations.
pub fn activate(primitive: &GaussianPrimitive) -> (f64, Vector3<f64>) {
    (
        sigmoid(primitive.opacity_raw),
        primitive.log_scale.map(f64::exp),
    )
}

fn rotation_from_unit(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

const MIN_QUAT_NORM: f64 = 1e-12;

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quaternion_to_rotation(q: &Vector4<f64>) -> Result<Matrix3<f64>> {
    let norm = q.norm();
    if !norm.is_finite() || norm <= MIN_QUAT_NORM {
        return Err(invalid(format!("quaternion norm {norm} is not usable")));
    }
    let u = q / norm;
    Ok(rotation_from_unit(u[0], u[1], u[2], u[3]))
}

/// `R S S^T R^T` with `S = diag(exp(log_scale))`.
pub fn covariance(log_scale: &Vector3<f64>, q: &Vector4<f64>) -> Result<Matrix3<f64>> {
    if !log_scale.iter().chain(q.iter()).all(|v| v.is_finite()) {
        return Err(invalid("non-finite covariance input"));
    }
    let r = quaternion_to_rotation(q)?;
    let var = Matrix3::from_diagonal(&log_scale.map(|s| (2.0 * s).exp()));
    let sigma = r * var * r.transpose();
    // Exact symmetry; the product is symmetric only up to rounding.
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Pulls a gradient on the rotation matrix back onto the raw quaternion,
/// including the normalization step.
pub(crate) fn rotation_vjp(q: &Vector4<f64>, grad_r: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let u = q / norm;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let g = grad_r;
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gu = Vector4::new(gw, gx, gy, gz);
    (gu - u * u.dot(&gu)) / norm
}

/// Gradients of `sigma = R diag(exp(2 s)) R^T` onto `(log_scale, quaternion)`.
pub(crate) fn covariance_vjp(
    log_scale: &Vector3<f64>,
    q: &Vector4<f64>,
    grad_sigma: &Matrix3<f64>,
) -> (Vector3<f64>, Vector4<f64>) {
    let r = quaternion_to_rotation(q).expect("quaternion validated upstream");
    let var = log_scale.map(|s| (2.0 * s).exp());
    let sym = grad_sigma + grad_sigma.transpose();
    let grad_r = sym * r * Matrix3::from_diagonal(&var);
    let grad_d = r.transpose() * grad_sigma * r;
    let grad_s = Vector3::new(
        grad_d[(0, 0)] * 2.0 * var[0],
        grad_d[(1, 1)] * 2.0 * var[1],
        grad_d[(2, 2)] * 2.0 * var[2],
    );
    (grad_s, rotation_vjp(q, &grad_r))
}
