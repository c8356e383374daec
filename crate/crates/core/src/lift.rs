//! Feed-forward lifting of an RGB-D image plus predicted attribute maps to
//! a pixel-aligned Gaussian set (one primitive per pixel).

use nalgebra::{Vector3, Vector4};

use crate::camera::Camera;
use crate::error::{invalid, mismatch, Result};
use crate::gaussian::{GaussianPrimitive, GaussianSet, Provenance};
use crate::grid::{DepthMap, Grid, ImageRgb};
use crate::pushpull::push_pull;
use crate::raster::{GradientBuffer, RenderTargets};

/// Opacity logit of freshly initialized primitives (sigmoid(4) ≈ 0.982).
pub const INIT_OPACITY_RAW: f64 = 4.0;
/// Initial splat scale in units of the pixel footprint at that depth.
pub const INIT_FOOTPRINT_SCALE: f64 = 1.5;
/// Default offset bound as a fraction of the median input depth.
pub const DEFAULT_OFFSET_FRACTION: f64 = 0.05;

/// A monocular RGB-D observation and its camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdInput {
    pub image: ImageRgb,
    pub depth: DepthMap,
    pub camera: Camera,
}

impl RgbdInput {
    pub fn new(image: ImageRgb, depth: DepthMap, camera: Camera) -> Result<Self> {
        let input = Self {
            image,
            depth,
            camera,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.image.ensure_dims(&self.depth, "image vs depth")?;
        if self.image.dims() != (self.camera.width, self.camera.height) {
            return Err(mismatch(format!(
                "image is {:?}, camera is {}x{}",
                self.image.dims(),
                self.camera.width,
                self.camera.height
            )));
        }
        if let Some(d) = self.depth.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(invalid(format!("depth must be positive and finite, found {d}")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn median_depth(&self) -> f64 {
        self.depth.median()
    }

    /// Offset bound used by [`lift_pixel_aligned`] unless overridden.
    pub fn default_clamp_offset(&self) -> f64 {
        DEFAULT_OFFSET_FRACTION * self.median_depth()
    }

    /// Builds an RGB-D input from a render. Pixels with alpha below `tau`
    /// have no trustworthy depth; their depth is filled by push-pull from
    /// the solid pixels. Returns `None` when no pixel is solid.
    pub fn from_render(render: &RenderTargets, camera: &Camera, tau: f64) -> Result<Option<Self>> {
        let solid = render.alpha.map(|a| *a >= tau);
        let depth = render.depth.map(|d| [*d]);
        let Some(filled) = push_pull(&depth, &solid) else {
            return Ok(None);
        };
        let depth = filled.map(|d| d[0].max(crate::raster::NEAR_PLANE * 2.0));
        let image = render.color.map(|c| [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)]);
        Self::new(image, depth, *camera).map(Some)
    }
}

/// Per-pixel Gaussian attributes predicted for an input image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeMaps {
    /// Camera-space positional offset added after unprojection.
    pub offset: Grid<Vector3<f64>>,
    pub color_residual: Grid<Vector3<f64>>,
    pub opacity_raw: Grid<f64>,
    pub log_scale: Grid<Vector3<f64>>,
    pub rotation: Grid<Vector4<f64>>,
}

impl AttributeMaps {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            offset: Grid::filled(width, height, Vector3::zeros()),
            color_residual: Grid::filled(width, height, Vector3::zeros()),
            opacity_raw: Grid::filled(width, height, 0.0),
            log_scale: Grid::filled(width, height, Vector3::zeros()),
            rotation: Grid::filled(width, height, Vector4::zeros()),
        }
    }

    /// Maps that reproduce the input photograph: zero offsets and
    /// residuals, nearly opaque, isotropic splats 1.5 pixel footprints wide,
    /// identity rotation.
    pub fn initial(input: &RgbdInput) -> Self {
        let (w, h) = (input.width(), input.height());
        let focal = 0.5 * (input.camera.fx + input.camera.fy);
        Self {
            offset: Grid::filled(w, h, Vector3::zeros()),
            color_residual: Grid::filled(w, h, Vector3::zeros()),
            opacity_raw: Grid::filled(w, h, INIT_OPACITY_RAW),
            log_scale: input
                .depth
                .map(|d| Vector3::repeat((INIT_FOOTPRINT_SCALE * d / focal).ln())),
            rotation: Grid::filled(w, h, Vector4::new(1.0, 0.0, 0.0, 0.0)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.opacity_raw.dims()
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let dims = (width, height);
        if self.offset.dims() != dims
            || self.color_residual.dims() != dims
            || self.opacity_raw.dims() != dims
            || self.log_scale.dims() != dims
            || self.rotation.dims() != dims
        {
            return Err(mismatch(format!("attribute maps do not match {width}x{height}")));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.offset.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.color_residual.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_raw.iter().all(|x| x.is_finite())
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotation.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Number of scalars per pixel.
    pub const CHANNELS: usize = 14;

    /// Channel `k` of pixel `i` in the order offset, residual, opacity,
    /// log_scale, rotation.
    pub fn channel(&self, i: usize, k: usize) -> f64 {
        match k {
            0..=2 => self.offset.as_slice()[i][k],
            3..=5 => self.color_residual.as_slice()[i][k - 3],
            6 => self.opacity_raw.as_slice()[i],
            7..=9 => self.log_scale.as_slice()[i][k - 7],
            10..=13 => self.rotation.as_slice()[i][k - 10],
            _ => panic!("attribute channel {k} out of range"),
        }
    }

    pub fn channel_mut(&mut self, i: usize, k: usize) -> &mut f64 {
        match k {
            0..=2 => &mut self.offset.as_mut_slice()[i][k],
            3..=5 => &mut self.color_residual.as_mut_slice()[i][k - 3],
            6 => &mut self.opacity_raw.as_mut_slice()[i],
            7..=9 => &mut self.log_scale.as_mut_slice()[i][k - 7],
            10..=13 => &mut self.rotation.as_mut_slice()[i][k - 10],
            _ => panic!("attribute channel {k} out of range"),
        }
    }
}

/// Gradients with respect to the lifting inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftGrads {
    pub maps: AttributeMaps,
    pub image: ImageRgb,
    pub depth: DepthMap,
}

/// Camera-space point `depth * ((u - cx)/fx, (v - cy)/fy, 1)`.
pub fn unproject(u: f64, v: f64, depth: f64, cam: &Camera) -> Result<Vector3<f64>> {
    cam.unproject(u, v, depth)
}

/// One primitive per pixel: position = unprojected depth plus the clamped
/// offset (camera frame, then moved to world), color = input plus residual
/// clamped to [0, 1], other attributes copied.
pub fn lift_pixel_aligned(
    input: &RgbdInput,
    maps: &AttributeMaps,
    clamp_offset: f64,
    view: u32,
) -> Result<GaussianSet> {
    let (w, h) = (input.width(), input.height());
    maps.validate(w, h)?;
    if !(clamp_offset >= 0.0) {
        return Err(invalid(format!("clamp_offset must be >= 0, got {clamp_offset}")));
    }
    let cam = &input.camera;
    let mut set = GaussianSet::empty();
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let base = cam.unproject(col as f64, row as f64, input.depth.as_slice()[i])?;
            let offset = maps.offset.as_slice()[i].map(|o| o.clamp(-clamp_offset, clamp_offset));
            let rgb = input.image.as_slice()[i];
            let residual = maps.color_residual.as_slice()[i];
            let color = Vector3::new(
                (rgb[0] + residual[0]).clamp(0.0, 1.0),
                (rgb[1] + residual[1]).clamp(0.0, 1.0),
                (rgb[2] + residual[2]).clamp(0.0, 1.0),
            );
            set.push(
                GaussianPrimitive {
                    position: cam.to_world(&(base + offset)),
                    color,
                    opacity_raw: maps.opacity_raw.as_slice()[i],
                    log_scale: maps.log_scale.as_slice()[i],
                    rotation: maps.rotation.as_slice()[i],
                },
                Provenance {
                    view,
                    row: row as u32,
                    col: col as u32,
                },
            );
        }
    }
    Ok(set)
}

/// Pulls per-primitive gradients of a pixel-aligned set back onto the
/// attribute maps and the RGB-D input. Clamped coordinates receive zero
/// gradient.
pub fn lift_backward(
    input: &RgbdInput,
    maps: &AttributeMaps,
    clamp_offset: f64,
    grads: &GradientBuffer,
) -> Result<LiftGrads> {
    let (w, h) = (input.width(), input.height());
    maps.validate(w, h)?;
    if grads.len() != w * h {
        return Err(mismatch(format!(
            "{} primitive gradients for a {}x{} lift",
            grads.len(),
            w,
            h
        )));
    }
    let cam = &input.camera;
    let rot = cam.rotation();
    let mut out = LiftGrads {
        maps: AttributeMaps::zeros(w, h),
        image: Grid::filled(w, h, [0.0; 3]),
        depth: Grid::filled(w, h, 0.0),
    };
    for (i, g) in grads.grads.iter().enumerate() {
        let (col, row) = (i % w, i / w);
        // world = R^T (p_cam - t)  =>  dL/dp_cam = R dL/dworld
        let g_cam = rot * g.position;
        let offset = maps.offset.as_slice()[i];
        out.maps.offset.as_mut_slice()[i] =
            Vector3::from_fn(|k, _| if offset[k].abs() <= clamp_offset { g_cam[k] } else { 0.0 });
        out.depth.as_mut_slice()[i] = g_cam.dot(&cam.ray(col as f64, row as f64));

        let rgb = input.image.as_slice()[i];
        let residual = maps.color_residual.as_slice()[i];
        let mut g_color = Vector3::zeros();
        let mut g_image = [0.0; 3];
        for k in 0..3 {
            let v = rgb[k] + residual[k];
            if (0.0..=1.0).contains(&v) {
                g_color[k] = g.color[k];
                g_image[k] = g.color[k];
            }
        }
        out.maps.color_residual.as_mut_slice()[i] = g_color;
        out.image.as_mut_slice()[i] = g_image;
        out.maps.opacity_raw.as_mut_slice()[i] = g.opacity_raw;
        out.maps.log_scale.as_mut_slice()[i] = g.log_scale;
        out.maps.rotation.as_mut_slice()[i] = g.rotation;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{orbit_rotation, Intrinsics, RigidTransform};
    use crate::raster::rasterize;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn posed_camera(w: usize, h: usize) -> Camera {
        Camera::new(
            Intrinsics {
                fx: 30.0,
                fy: 32.0,
                cx: (w as f64 - 1.0) / 2.0 + 0.3,
                cy: (h as f64 - 1.0) / 2.0 - 0.2,
            },
            w,
            h,
            RigidTransform {
                rotation: orbit_rotation(0.2, -0.1),
                translation: Vector3::new(0.1, 0.2, -0.3),
            },
        )
        .unwrap()
    }

    fn input(w: usize, h: usize) -> RgbdInput {
        let image = Grid::from_fn(w, h, |c, r| [c as f64 / w as f64, r as f64 / h as f64, 0.5]);
        let depth = Grid::from_fn(w, h, |c, r| 2.0 + 0.05 * c as f64 - 0.03 * r as f64);
        RgbdInput::new(image, depth, posed_camera(w, h)).unwrap()
    }

    #[test]
    fn unproject_examples() {
        let cam = posed_camera(8, 8);
        assert_eq!(unproject(cam.cx, cam.cy, 2.0, &cam).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        let p = unproject(cam.cx + cam.fx, cam.cy, 2.0, &cam).unwrap();
        assert_relative_eq!(p, Vector3::new(2.0, 0.0, 2.0), epsilon = 1e-12);
        assert!(unproject(1.0, 1.0, 0.0, &cam).is_err());
        assert!(unproject(1.0, 1.0, -1.0, &cam).is_err());
    }

    proptest! {
        #[test]
        fn unproject_project_round_trip(u in -5.0..70.0f64, v in -5.0..70.0f64, d in 0.05..50.0f64) {
            let cam = posed_camera(64, 64);
            let p = unproject(u, v, d, &cam).unwrap();
            let px = cam.project_camera(&p);
            prop_assert!((px.x - u).abs() < 1e-9 && (px.y - v).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_maps_reproduce_input() {
        let inp = input(5, 4);
        let maps = AttributeMaps::zeros(5, 4);
        let set = lift_pixel_aligned(&inp, &maps, 0.1, 3).unwrap();
        assert_eq!(set.len(), 20);
        assert!(set.is_pixel_aligned(3, 5, 4));
        for (i, (p, prov)) in set.iter().enumerate() {
            let (c, r) = (prov.col as usize, prov.row as usize);
            assert_eq!(i, r * 5 + c);
            let expected = inp.camera.to_world(
                &unproject(c as f64, r as f64, *inp.depth.get(c, r), &inp.camera).unwrap(),
            );
            assert_relative_eq!(p.position, expected, epsilon = 1e-12);
            assert_eq!(p.color, Vector3::from(*inp.image.get(c, r)));
            // reprojection lands on the provenance pixel center
            let (px, _) = inp.camera.project_world(&p.position).unwrap();
            assert!((px.x - c as f64).abs() < 1e-6 && (px.y - r as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn two_by_two_covers_all_pixels() {
        let set = lift_pixel_aligned(&input(2, 2), &AttributeMaps::zeros(2, 2), 0.1, 0).unwrap();
        let mut cells: Vec<_> = set.provenance().iter().map(|p| (p.row, p.col)).collect();
        cells.sort();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn offsets_and_residuals_are_clamped() {
        let inp = input(3, 3);
        let mut maps = AttributeMaps::zeros(3, 3);
        maps.offset.set(1, 1, Vector3::new(5.0, -5.0, 0.01));
        maps.color_residual.set(1, 1, Vector3::new(2.0, -2.0, 0.1));
        let set = lift_pixel_aligned(&inp, &maps, 0.05, 0).unwrap();
        let p = set.primitives()[4];
        let cam_pos = inp.camera.to_camera(&p.position);
        let base = unproject(1.0, 1.0, *inp.depth.get(1, 1), &inp.camera).unwrap();
        assert_relative_eq!(cam_pos - base, Vector3::new(0.05, -0.05, 0.01), epsilon = 1e-12);
        assert_relative_eq!(p.color, Vector3::new(1.0, 0.0, 0.6), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let inp = input(4, 4);
        assert!(lift_pixel_aligned(&inp, &AttributeMaps::zeros(3, 4), 0.1, 0).is_err());
        assert!(RgbdInput::new(inp.image.clone(), Grid::filled(4, 3, 1.0), inp.camera).is_err());
        assert!(RgbdInput::new(inp.image.clone(), Grid::filled(4, 4, 0.0), inp.camera).is_err());
    }

    #[test]
    fn constant_depth_reconstructs_input_colors() {
        // Oracle: render the initial lift from the source camera and compare.
        // Coplanar splats composite in index order, so the image is kept smooth.
        let cam = Camera::centered(24, 24, 24.0).unwrap();
        let image = Grid::from_fn(24, 24, |c, r| {
            [0.3 + 0.05 * (c as f64 / 24.0), 0.6 - 0.05 * (r as f64 / 24.0), 0.5]
        });
        let inp = RgbdInput::new(image, Grid::filled(24, 24, 2.0), cam).unwrap();
        let mut maps = AttributeMaps::initial(&inp);
        // saturate opacity
        maps.opacity_raw = Grid::filled(24, 24, 12.0);
        let set = lift_pixel_aligned(&inp, &maps, inp.default_clamp_offset(), 0).unwrap();
        let out = rasterize(&set, &cam, [0.0; 3]);
        for row in 2..22 {
            for col in 2..22 {
                let (a, b) = (out.color.get(col, row), inp.image.get(col, row));
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 2.0 / 255.0, "pixel ({col},{row}) {a:?} {b:?} alpha {}", out.alpha.get(col, row));
                }
            }
        }
    }

    #[test]
    fn from_render_fills_hole_depths() {
        let cam = Camera::centered(8, 8, 8.0).unwrap();
        let mut r = RenderTargets::background(8, 8, [0.0; 3]);
        for row in 0..8 {
            for col in 0..4 {
                r.alpha.set(col, row, 1.0);
                r.depth.set(col, row, 2.0);
            }
        }
        let inp = RgbdInput::from_render(&r, &cam, 0.5).unwrap().unwrap();
        assert!(inp.depth.iter().all(|d| (*d - 2.0).abs() < 1e-12));
        let empty = RenderTargets::background(8, 8, [0.0; 3]);
        assert!(RgbdInput::from_render(&empty, &cam, 0.5).unwrap().is_none());
    }
}
