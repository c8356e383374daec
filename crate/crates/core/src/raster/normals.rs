use nalgebra::Vector3;

use crate::camera::Camera;
use crate::grid::{DepthMap, Grid};

/// Unit vectors from each pixel's surface point toward the camera center,
/// in camera space (the negated, normalized pixel ray).
pub fn view_directions(cam: &Camera) -> Grid<Vector3<f64>> {
    Grid::from_fn(cam.width, cam.height, |col, row| {
        -cam.ray(col as f64, row as f64).normalize()
    })
}

/// Camera-space unit normals of the surface described by a depth map,
/// oriented toward the camera.
///
/// Tangents come from central differences of unprojected neighbors
/// (one-sided on the border); pixels whose tangent cross product vanishes
/// fall back to the view direction.
pub fn normals_from_depth(depth: &DepthMap, cam: &Camera) -> Grid<Vector3<f64>> {
    let (w, h) = depth.dims();
    let point = |col: usize, row: usize| {
        cam.unproject_unchecked(col as f64, row as f64, *depth.get(col, row))
    };
    Grid::from_fn(w, h, |col, row| {
        let tu = if w < 2 {
            Vector3::zeros()
        } else {
            let (a, b) = (col.saturating_sub(1), (col + 1).min(w - 1));
            point(b, row) - point(a, row)
        };
        let tv = if h < 2 {
            Vector3::zeros()
        } else {
            let (a, b) = (row.saturating_sub(1), (row + 1).min(h - 1));
            point(col, b) - point(col, a)
        };
        // tu x tv points away from the camera for any positive depth map.
        let n = tv.cross(&tu);
        let norm = n.norm();
        if norm > 1e-12 && norm.is_finite() {
            n / norm
        } else {
            -cam.ray(col as f64, row as f64).normalize()
        }
    })
}
