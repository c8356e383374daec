use rayon::prelude::*;

use super::project::project;
use super::{
    ProjectedGaussian, RenderTargets, DEPTH_EPS, TILE_SIZE, TRANSMITTANCE_MIN,
};
use crate::camera::Camera;
use crate::gaussian::GaussianSet;
use crate::grid::{Grid, Rgb};

/// Composites the splats (already in front-to-back order) covering pixel
/// `(px, py)`. Shared by the tiled and the reference rasterizer.
#[inline]
pub(crate) fn composite_pixel<'a>(
    splats: impl Iterator<Item = &'a ProjectedGaussian>,
    px: f64,
    py: f64,
    background: &Rgb,
) -> (Rgb, f64, f64) {
    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut alpha = 0.0;
    let mut depth_sum = 0.0;
    for s in splats {
        let Some(sample) = s.eval(px, py) else {
            continue;
        };
        let w = sample.alpha * transmittance;
        color[0] += s.color[0] * w;
        color[1] += s.color[1] * w;
        color[2] += s.color[2] * w;
        depth_sum += s.camera_depth * w;
        alpha += w;
        transmittance *= 1.0 - sample.alpha;
        if transmittance < TRANSMITTANCE_MIN {
            break;
        }
    }
    let rest = 1.0 - alpha;
    for c in 0..3 {
        color[c] += rest * background[c];
    }
    (color, depth_sum / (alpha + DEPTH_EPS), alpha)
}

/// Front-to-back order: camera depth, ties broken by primitive index.
pub(crate) fn depth_order(a: &ProjectedGaussian, b: &ProjectedGaussian) -> std::cmp::Ordering {
    a.camera_depth
        .total_cmp(&b.camera_depth)
        .then(a.index.cmp(&b.index))
}

pub(crate) struct TileGrid {
    pub tiles_x: usize,
    /// Per tile, indices into the projected list in front-to-back order.
    pub bins: Vec<Vec<usize>>,
}

impl TileGrid {
    pub fn build(projected: &[ProjectedGaussian], width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in projected.iter().enumerate() {
            let x0 = (s.mean2d.x - s.radius).floor();
            let x1 = (s.mean2d.x + s.radius).ceil();
            let y0 = (s.mean2d.y - s.radius).floor();
            let y1 = (s.mean2d.y + s.radius).ceil();
            if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 {
                continue;
            }
            let tx0 = (x0.max(0.0) as usize) / TILE_SIZE;
            let ty0 = (y0.max(0.0) as usize) / TILE_SIZE;
            let tx1 = (x1.min((width - 1) as f64) as usize) / TILE_SIZE;
            let ty1 = (y1.min((height - 1) as f64) as usize) / TILE_SIZE;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    bins[ty * tiles_x + tx].push(k);
                }
            }
        }
        for bin in &mut bins {
            bin.sort_by(|&a, &b| depth_order(&projected[a], &projected[b]));
        }
        Self {
            tiles_x,

            bins,
        }
    }

    pub fn tile_pixels(
        &self,
        tile: usize,
        width: usize,
        height: usize,
    ) -> impl Iterator<Item = (usize, usize)> {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let x1 = (x0 + TILE_SIZE).min(width);
        let y1 = (y0 + TILE_SIZE).min(height);
        (y0..y1).flat_map(move |row| (x0..x1).map(move |col| (col, row)))
    }
}

/// Tile-based forward rasterization of color, expected depth and alpha.
pub fn rasterize(set: &GaussianSet, cam: &Camera, background: Rgb) -> RenderTargets {
    let (width, height) = (cam.width, cam.height);
    let projected = project(set, cam);
    if projected.is_empty() {
        return RenderTargets::background(width, height, background);
    }
    let tiles = TileGrid::build(&projected, width, height);
    let per_tile: Vec<Vec<(usize, Rgb, f64, f64)>> = (0..tiles.bins.len())
        .into_par_iter()
        .map(|t| {
            let bin = &tiles.bins[t];
            tiles
                .tile_pixels(t, width, height)
                .map(|(col, row)| {
                    let (c, d, a) = composite_pixel(
                        bin.iter().map(|&k| &projected[k]),
                        col as f64,
                        row as f64,
                        &background,
                    );
                    (row * width + col, c, d, a)
                })
                .collect()
        })
        .collect();

    let mut out = RenderTargets::background(width, height, background);
    for tile in per_tile {
        for (i, c, d, a) in tile {
            out.color.as_mut_slice()[i] = c;
            out.depth.as_mut_slice()[i] = d;
            out.alpha.as_mut_slice()[i] = a;
        }
    }
    out
}

/// Naive oracle: one global front-to-back sort, every splat tested at every
/// pixel.
pub fn rasterize_reference(set: &GaussianSet, cam: &Camera, background: Rgb) -> RenderTargets {
    let mut projected = project(set, cam);
    projected.sort_by(depth_order);
    let (width, height) = (cam.width, cam.height);
    let mut color = Grid::filled(width, height, background);
    let mut depth = Grid::filled(width, height, 0.0);
    let mut alpha = Grid::filled(width, height, 0.0);
    for row in 0..height {
        for col in 0..width {
            let (c, d, a) =
                composite_pixel(projected.iter(), col as f64, row as f64, &background);
            color.set(col, row, c);
            depth.set(col, row, d);
            alpha.set(col, row, a);
        }
    }
    RenderTargets {
        color,
        depth,
        alpha,
    }
}
