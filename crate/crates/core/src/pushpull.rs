//! Push-pull pyramid fill of unknown pixels from known neighbors.

use crate::grid::Grid;

/// Fills every pixel where `known` is false from the surrounding known
/// pixels; known pixels are returned unchanged. Returns `None` when no pixel
/// is known.
///
/// Pull: each coarser level averages the weighted children of a 2x2 block
/// and keeps `min(sum of weights, 1)` as its confidence. Push: from the
/// coarsest level down, every pixel with confidence below one is blended
/// with the bilinear upsampling of the level above.
pub fn push_pull<const C: usize>(data: &Grid<[f64; C]>, known: &Grid<bool>) -> Option<Grid<[f64; C]>> {
    assert!(data.same_dims(known), "mask and data dimensions differ");
    if !known.iter().any(|k| *k) {
        return None;
    }
    if known.iter().all(|k| *k) {
        return Some(data.clone());
    }

    let mut levels: Vec<(Grid<[f64; C]>, Grid<f64>)> = vec![(
        data.clone(),
        known.map(|&k| if k { 1.0 } else { 0.0 }),
    )];
    while {
        let (w, h) = levels.last().unwrap().0.dims();
        w > 1 || h > 1
    } {
        let (fine, fine_w) = levels.last().unwrap();
        let (w, h) = fine.dims();
        let (cw, ch) = (w.div_ceil(2), h.div_ceil(2));
        let mut coarse = Grid::filled(cw, ch, [0.0; C]);
        let mut coarse_w = Grid::filled(cw, ch, 0.0);
        for row in 0..ch {
            for col in 0..cw {
                let mut acc = [0.0; C];
                let mut wsum = 0.0;
                for (c2, r2) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (fc, fr) = (2 * col + c2, 2 * row + r2);
                    if fc < w && fr < h {
                        let wt = *fine_w.get(fc, fr);
                        if wt > 0.0 {
                            let v = fine.get(fc, fr);
                            for k in 0..C {
                                acc[k] += wt * v[k];
                            }
                            wsum += wt;
                        }
                    }
                }
                if wsum > 0.0 {
                    for a in acc.iter_mut() {
                        *a /= wsum;
                    }
                }
                coarse.set(col, row, acc);
                coarse_w.set(col, row, wsum.min(1.0));
            }
        }
        levels.push((coarse, coarse_w));
    }

    for l in (0..levels.len() - 1).rev() {
        let (upper, rest) = levels.split_at_mut(l + 1);
        let (fine, fine_w) = &mut upper[l];
        let (coarse, _) = &rest[0];
        let (w, h) = fine.dims();
        let (cw, ch) = coarse.dims();
        for row in 0..h {
            for col in 0..w {
                let wt = *fine_w.get(col, row);
                if wt >= 1.0 {
                    continue;
                }
                let up = sample_bilinear(
                    coarse,
                    ((col as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (cw - 1) as f64),
                    ((row as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (ch - 1) as f64),
                );
                let v = fine.get_mut(col, row);
                for k in 0..C {
                    v[k] = wt * v[k] + (1.0 - wt) * up[k];
                }
                fine_w.set(col, row, 1.0);
            }
        }
    }

    let mut out = levels.swap_remove(0).0;
    // Known pixels pass through untouched.
    for (i, k) in known.iter().enumerate() {
        if *k {
            out.as_mut_slice()[i] = data.as_slice()[i];
        }
    }
    Some(out)
}

fn sample_bilinear<const C: usize>(g: &Grid<[f64; C]>, x: f64, y: f64) -> [f64; C] {
    let (w, h) = g.dims();
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut out = [0.0; C];
    for k in 0..C {
        let top = g.get(x0, y0)[k] * (1.0 - fx) + g.get(x1, y0)[k] * fx;
        let bottom = g.get(x0, y1)[k] * (1.0 - fx) + g.get(x1, y1)[k] * fx;
        out[k] = top * (1.0 - fy) + bottom * fy;
    }
    out
}
