//! Complementary aggregation of two pixel-aligned Gaussian sets.
//!
//! Alpha maps rendered from each set in each view are binarized into hole
//! masks; a donor primitive is transferred where the recipient set has a
//! hole and the donor set is solid.

use crate::camera::Camera;
use crate::error::{invalid, mismatch, Result};
use crate::gaussian::GaussianSet;
use crate::grid::{DepthMap, Grid};
use crate::lift::{lift_pixel_aligned, RgbdInput};
use crate::predictor::{MapSource, Slot, SlotKey};
use crate::raster::rasterize;

/// Per-pixel booleans defined on one view's pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub values: Grid<bool>,
    pub grid_view: u32,
}

impl BinaryMask {
    pub fn new(values: Grid<bool>, grid_view: u32) -> Self {
        Self { values, grid_view }
    }

    pub fn filled(width: usize, height: usize, value: bool, grid_view: u32) -> Self {
        Self::new(Grid::filled(width, height, value), grid_view)
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        *self.values.get(col, row)
    }
}

/// Hole mask: true where `alpha < tau`.
pub fn binarize_alpha(alpha: &DepthMap, tau: f64, grid_view: u32) -> BinaryMask {
    BinaryMask::new(alpha.map(|a| *a < tau), grid_view)
}

/// Alpha map rendered from set `i` in view `j`, indexed as `A_ij`.
pub struct AlphaQuad<'a> {
    pub a00: &'a DepthMap,
    pub a01: &'a DepthMap,
    pub a10: &'a DepthMap,
    pub a11: &'a DepthMap,
}

/// Returns `(M_1to0, M_0to1)`.
///
/// `M_1to0` lives on view 1's grid and marks pixels where set 0 has a hole
/// but set 1 is solid (set 1 can donate to set 0). `M_0to1` lives on
/// view 0's grid and marks pixels where set 1 has a hole but set 0 is solid.
pub fn complementary_masks(alphas: &AlphaQuad<'_>, tau: f64) -> Result<(BinaryMask, BinaryMask)> {
    alphas.a01.ensure_dims(alphas.a11, "view 1 alpha maps")?;
    alphas.a00.ensure_dims(alphas.a10, "view 0 alpha maps")?;
    let m10 = Grid::from_fn(alphas.a01.width(), alphas.a01.height(), |c, r| {
        *alphas.a01.get(c, r) < tau && !(*alphas.a11.get(c, r) < tau)
    });
    let m01 = Grid::from_fn(alphas.a00.width(), alphas.a00.height(), |c, r| {
        *alphas.a10.get(c, r) < tau && !(*alphas.a00.get(c, r) < tau)
    });
    Ok((BinaryMask::new(m10, 1), BinaryMask::new(m01, 0)))
}

/// Keeps the primitives whose provenance pixel is set in `mask`, in order.
/// `set` must be pixel-aligned to the mask's view and grid.
pub fn select_primitives(set: &GaussianSet, mask: &BinaryMask) -> Result<GaussianSet> {
    let (w, h) = mask.dims();
    if !set.is_pixel_aligned(mask.grid_view, w, h) {
        return Err(invalid(format!(
            "set of {} primitives is not pixel-aligned to view {} ({}x{})",
            set.len(),
            mask.grid_view,
            w,
            h
        )));
    }
    let mut out = GaussianSet::empty();
    for (p, prov) in set.iter() {
        if mask.get(prov.col as usize, prov.row as usize) {
            out.push(*p, *prov);
        }
    }
    Ok(out)
}

/// `a` followed by `b`, provenance preserved.
pub fn concat(a: &GaussianSet, b: &GaussianSet) -> GaussianSet {
    let mut out = a.clone();
    for (p, prov) in b.iter() {
        out.push(*p, *prov);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationOutcome {
    pub merged_set: GaussianSet,
    pub donor_count: usize,
    /// `(M_1to0, M_0to1)`.
    pub masks: (BinaryMask, BinaryMask),
}

/// `GS0_hat = concat(gs0, gs1[M_1to0])` and `GS1_hat = concat(gs1, gs0[M_0to1])`.
///
/// `gs0` must be pixel-aligned to `cam0` (view 0) and `gs1` to `cam1`
/// (view 1); an empty `gs1` is accepted and donates nothing.
pub fn aggregate_pair(
    gs0: &GaussianSet,
    gs1: &GaussianSet,
    cam0: &Camera,
    cam1: &Camera,
    tau: f64,
) -> Result<(AggregationOutcome, AggregationOutcome)> {
    let bg = [0.0; 3];
    let a00 = rasterize(gs0, cam0, bg).alpha;
    let a01 = rasterize(gs0, cam1, bg).alpha;
    let a10 = rasterize(gs1, cam0, bg).alpha;
    let a11 = rasterize(gs1, cam1, bg).alpha;
    let (m10, m01) = complementary_masks(
        &AlphaQuad {
            a00: &a00,
            a01: &a01,
            a10: &a10,
            a11: &a11,
        },
        tau,
    )?;
    let donors_to_0 = if gs1.is_empty() {
        GaussianSet::empty()
    } else {
        select_primitives(gs1, &m10)?
    };
    let donors_to_1 = select_primitives(gs0, &m01)?;
    let out0 = AggregationOutcome {
        merged_set: concat(gs0, &donors_to_0),
        donor_count: donors_to_0.len(),
        masks: (m10.clone(), m01.clone()),
    };
    let out1 = AggregationOutcome {
        merged_set: concat(gs1, &donors_to_1),
        donor_count: donors_to_1.len(),
        masks: (m10, m01),
    };
    Ok((out0, out1))
}

/// Intermediate products of two-view inference.
#[derive(Clone, Debug)]
pub struct InferenceResult {
    pub gs0: GaussianSet,
    /// `None` when the novel view sees nothing of `gs0`.
    pub gs1: Option<GaussianSet>,
    pub aggregated: AggregationOutcome,
}

/// Two-view inference: lift `GS0`, render it in `novel_cam`, lift `GS1`
/// from that render with the same predictor, and return `GS0_hat`.
///
/// `scene` selects per-scene state in predictors that keep it.
pub fn inference_aggregate(
    input: &RgbdInput,
    scene: usize,
    predictor: &dyn MapSource,
    novel_cam: &Camera,
    tau: f64,
) -> Result<InferenceResult> {
    if !input.camera.same_intrinsics(novel_cam) {
        return Err(mismatch("novel camera must share the canonical intrinsics"));
    }
    let maps0 = predictor.predict_maps(input, SlotKey::new(scene, Slot::Canonical))?;
    let gs0 = lift_pixel_aligned(input, &maps0, predictor.clamp_offset(input), 0)?;
    let rendered = rasterize(&gs0, novel_cam, [0.0; 3]);
    let Some(input1) = RgbdInput::from_render(&rendered, novel_cam, tau)? else {
        let (w, h) = (input.width(), input.height());
        return Ok(InferenceResult {
            aggregated: AggregationOutcome {
                merged_set: gs0.clone(),
                donor_count: 0,
                masks: (
                    BinaryMask::filled(w, h, false, 1),
                    BinaryMask::filled(w, h, false, 0),
                ),
            },
            gs0,
            gs1: None,
        });
    };
    let maps1 = predictor.predict_maps(&input1, SlotKey::new(scene, Slot::Novel))?;
    let gs1 = lift_pixel_aligned(&input1, &maps1, predictor.clamp_offset(&input1), 1)?;
    let (out0, _) = aggregate_pair(&gs0, &gs1, &input.camera, novel_cam, tau)?;
    Ok(InferenceResult {
        gs0,
        gs1: Some(gs1),
        aggregated: out0,
    })
}
