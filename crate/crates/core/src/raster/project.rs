use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{ProjectedGaussian, PrimitiveGrad, LOW_PASS, NEAR_PLANE, SUPPORT_SIGMAS};
use crate::camera::Camera;
use crate::gaussian::{activate, covariance, covariance_vjp, GaussianPrimitive, GaussianSet};

/// Jacobian of the perspective projection at camera-space point `p`.
#[inline]
fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    )
}

pub(crate) fn project_one(
    index: usize,
    prim: &GaussianPrimitive,
    cam: &Camera,
) -> Option<ProjectedGaussian> {
    let p = cam.to_camera(&prim.position);
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    let sigma = covariance(&prim.log_scale, &prim.rotation).ok()?;
    let w = cam.rotation();
    let j = projection_jacobian(cam, &p);
    let m = w * sigma * w.transpose();
    let mut cov2d = j * m * j.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5 + Matrix2::identity() * LOW_PASS;
    let det = cov2d.determinant();
    assert!(det > 0.0, "dilated screen covariance must be invertible");
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let half_trace = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = half_trace + (half_trace * half_trace - det).max(0.0).sqrt();
    let (opacity, _) = activate(prim);
    Some(ProjectedGaussian {
        index,
        mean2d: cam.project_camera(&p),
        cov2d,
        conic,
        camera_depth: p.z,
        opacity,
        color: prim.color,
        radius: SUPPORT_SIGMAS * lambda_max.sqrt() + 1.0,
    })
}

/// EWA projection of every primitive in front of the near plane. Culled
/// primitives are absent from the output; `index` refers back to the set.
pub fn project(set: &GaussianSet, cam: &Camera) -> Vec<ProjectedGaussian> {
    set.primitives()
        .iter()
        .enumerate()
        .filter_map(|(i, prim)| project_one(i, prim, cam))
        .collect()
}

/// Gradients with respect to the projected splat quantities.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct SplatGrad {
    pub mean2d: Vector2<f64>,
    /// Gradient with respect to the full (unsymmetrized) conic matrix.
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub depth: f64,
}

impl SplatGrad {
    pub fn add_assign(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

/// Pulls splat-level gradients back to the raw primitive parameters.
pub(crate) fn project_backward(
    prim: &GaussianPrimitive,
    projected: &ProjectedGaussian,
    cam: &Camera,
    g: &SplatGrad,
) -> PrimitiveGrad {
    let p = cam.to_camera(&prim.position);
    let w = cam.rotation();
    let sigma = covariance(&prim.log_scale, &prim.rotation).expect("projected primitive");
    let j = projection_jacobian(cam, &p);
    let m = w * sigma * w.transpose();

    // conic = V^{-1}  =>  dV = -Q dQ Q
    let q = &projected.conic;
    let grad_v = -(q.transpose() * g.conic * q.transpose());
    // V = sym(J M J^T) + lowpass
    let grad_v = (grad_v + grad_v.transpose()) * 0.5;
    let grad_m: Matrix3<f64> = j.transpose() * grad_v * j;
    let grad_j: Matrix2x3<f64> = (grad_v + grad_v.transpose()) * j * m;
    let grad_sigma = w.transpose() * grad_m * w;

    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut gp = Vector3::zeros();
    // mean2d = (fx x/z + cx, fy y/z + cy)
    gp.x += g.mean2d.x * fx * iz;
    gp.y += g.mean2d.y * fy * iz;
    gp.z += -g.mean2d.x * fx * p.x * iz2 - g.mean2d.y * fy * p.y * iz2;
    // Jacobian entries
    gp.x += grad_j[(0, 2)] * (-fx * iz2);
    gp.y += grad_j[(1, 2)] * (-fy * iz2);
    gp.z += grad_j[(0, 0)] * (-fx * iz2)
        + grad_j[(0, 2)] * (2.0 * fx * p.x * iz3)
        + grad_j[(1, 1)] * (-fy * iz2)
        + grad_j[(1, 2)] * (2.0 * fy * p.y * iz3);
    gp.z += g.depth;

    let (grad_log_scale, grad_rotation) =
        covariance_vjp(&prim.log_scale, &prim.rotation, &grad_sigma);
    let opacity = projected.opacity;
    PrimitiveGrad {
        position: w.transpose() * gp,
        color: g.color,
        opacity_raw: g.opacity * opacity * (1.0 - opacity),
        log_scale: grad_log_scale,
        rotation: grad_rotation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector4;

    fn prim(position: Vector3<f64>, log_sigma: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            position,
            color: Vector3::new(0.2, 0.4, 0.6),
            opacity_raw: 0.0,
            log_scale: Vector3::repeat(log_sigma),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    #[test]
    fn on_axis_primitive_lands_on_principal_point() {
        let cam = Camera::centered(64, 48, 60.0).unwrap();
        let set = GaussianSet::from_primitives(0, vec![prim(Vector3::new(0.0, 0.0, 2.5), -3.0)]);
        let out = project(&set, &cam);
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out[0].mean2d, Vector2::new(cam.cx, cam.cy), epsilon = 1e-12);
        assert_eq!(out[0].camera_depth, 2.5);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = Camera::centered(32, 32, 30.0).unwrap();
        let set = GaussianSet::from_primitives(
            0,
            vec![
                prim(Vector3::new(0.0, 0.0, -1.0), -2.0),
                prim(Vector3::new(0.0, 0.0, 0.005), -2.0),
                prim(Vector3::new(0.1, 0.0, 1.0), -2.0),
            ],
        );
        let out = project(&set, &cam);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].index, 2);
    }

    #[test]
    fn isotropic_covariance_matches_numerical_jacobian() {
        // Oracle: numerical Jacobian of the projection applied to sigma^2 I.
        let cam = Camera::centered(64, 64, 70.0).unwrap();
        let sigma: f64 = 0.02;
        let mu = Vector3::new(0.05, -0.03, 2.0);
        let set = GaussianSet::from_primitives(0, vec![prim(mu, sigma.ln())]);
        let out = project(&set, &cam)[0];
        let h = 1e-6;
        let mut jac = Matrix2x3::zeros();
        for k in 0..3 {
            let mut a = mu;
            let mut b = mu;
            a[k] += h;
            b[k] -= h;
            let d = (cam.project_camera(&a) - cam.project_camera(&b)) / (2.0 * h);
            jac.set_column(k, &d);
        }
        let expected = jac * (Matrix3::identity() * sigma * sigma) * jac.transpose()
            + Matrix2::identity() * LOW_PASS;
        assert_relative_eq!(out.cov2d, expected, epsilon = 1e-6);
        // and the on-axis first-order form
        let d = 2.0;
        let approx_diag = Vector2::new(
            (cam.fx * sigma / d).powi(2) + LOW_PASS,
            (cam.fy * sigma / d).powi(2) + LOW_PASS,
        );
        assert_relative_eq!(out.cov2d.diagonal(), approx_diag, max_relative = 1e-2);
    }
}
