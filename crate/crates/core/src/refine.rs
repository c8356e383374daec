//! Stage-two refinement: artifact localization from alpha and
//! depth-derived normals, arc sampling between two views, sequence
//! in-painting and the masked video loss.

use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::aggregate::BinaryMask;
use crate::camera::{orbit_angles, Camera};
use crate::error::{invalid, mismatch, Error, Result};
use crate::gaussian::{GaussianSet, Thresholds};
use crate::grid::{DepthMap, Grid, ImageRgb, Rgb};
use crate::losses::{total_loss, Branch, LossReport};
use crate::pushpull::push_pull;
use crate::raster::{normals_from_depth, rasterize, rasterize_backward, view_directions, RenderGrads, RenderTargets};
use crate::train::{Gradients, Trainer};

/// Views sampled between the canonical and the novel camera.
pub const ARC_FRAMES: usize = 16;

/// True where `alpha < tau_artifact` and the angle between the normal and
/// the view direction is below `tau_theta`.
pub fn artifact_mask(
    alpha: &DepthMap,
    normals: &Grid<Vector3<f64>>,
    view_dirs: &Grid<Vector3<f64>>,
    th: &Thresholds,
) -> Result<BinaryMask> {
    alpha.ensure_dims(normals, "alpha and normals")?;
    alpha.ensure_dims(view_dirs, "alpha and view directions")?;
    let values = Grid::from_fn(alpha.width(), alpha.height(), |c, r| {
        let cos = normals.get(c, r).dot(view_dirs.get(c, r)).clamp(-1.0, 1.0);
        *alpha.get(c, r) < th.tau_artifact && cos.acos() < th.tau_theta
    });
    Ok(BinaryMask::new(values, 0))
}

/// Artifact mask of one render seen from `cam`.
pub fn render_artifact_mask(render: &RenderTargets, cam: &Camera, th: &Thresholds) -> Result<BinaryMask> {
    let normals = normals_from_depth(&render.depth, cam);
    artifact_mask(&render.alpha, &normals, &view_directions(cam), th)
}

/// `n` cameras from `cam0` to `cam1` (both included), interpolating yaw and
/// pitch linearly about a pivot on `cam0`'s optical axis.
///
/// `cam1` must be an orbit of `cam0` (see [`Camera::orbit`]) about such a
/// pivot.
pub fn sample_arc(cam0: &Camera, cam1: &Camera, n: usize) -> Result<Vec<Camera>> {
    if !cam0.same_intrinsics(cam1) {
        return Err(mismatch("arc endpoints must share intrinsics"));
    }
    if n == 0 {
        return Err(invalid("arc needs at least one frame"));
    }
    let (r0, t0) = (cam0.world_to_camera.rotation, cam0.world_to_camera.translation);
    let (r1, t1) = (cam1.world_to_camera.rotation, cam1.world_to_camera.translation);
    let o = r0 * r1.transpose();
    let (yaw, pitch) = orbit_angles(&o).ok_or_else(|| invalid("cameras differ by a roll, not a yaw/pitch orbit"))?;
    // t1 = O^T t0 + (I - O^T) p with p = (0, 0, s)
    let a = (Matrix3::identity() - o.transpose()) * Vector3::z();
    let b = t1 - o.transpose() * t0;
    let s = if a.norm_squared() > 1e-18 { a.dot(&b) / a.norm_squared() } else { 0.0 };
    if (a * s - b).norm() > 1e-6 * (1.0 + b.norm()) {
        return Err(invalid("cameras are not related by an orbit about the optical axis"));
    }
    let pivot = Vector3::new(0.0, 0.0, s);
    Ok((0..n)
        .map(|k| {
            if k + 1 == n && n > 1 {
                return *cam1;
            }
            let t = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
            if t == 0.0 {
                *cam0
            } else {
                cam0.orbit(&pivot, t * yaw, t * pitch)
            }
        })
        .collect())
}

/// Renders and artifact masks along an arc.
#[derive(Clone, Debug)]
pub struct ArcSequence {
    pub cameras: Vec<Camera>,
    pub renders: Vec<RenderTargets>,
    pub masks: Vec<BinaryMask>,
}

impl ArcSequence {
    pub fn render(set: &GaussianSet, cameras: Vec<Camera>, th: &Thresholds, background: Rgb) -> Result<Self> {
        let renders: Vec<RenderTargets> = cameras.par_iter().map(|c| rasterize(set, c, background)).collect();
        let masks = renders
            .iter()
            .zip(&cameras)
            .map(|(r, c)| render_artifact_mask(r, c, th))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cameras,
            renders,
            masks,
        })
    }

    pub fn colors(&self) -> Vec<ImageRgb> {
        self.renders.iter().map(|r| r.color.clone()).collect()
    }

    /// Total number of artifact pixels over all frames.
    pub fn popcount(&self) -> usize {
        self.masks.iter().map(BinaryMask::count).sum()
    }
}

/// Output frames of an in-painter.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintResult {
    pub frames: Vec<ImageRgb>,
}

/// Fills masked pixels of a frame sequence. Implementations must return
/// unmasked pixels unchanged.
pub trait Inpainter: Send + Sync {
    fn inpaint(&self, frames: &[ImageRgb], masks: &[BinaryMask]) -> Result<InpaintResult>;
}

fn check_sequence(frames: &[ImageRgb], masks: &[BinaryMask]) -> Result<()> {
    if frames.len() != masks.len() {
        return Err(mismatch(format!("{} frames but {} masks", frames.len(), masks.len())));
    }
    for (f, m) in frames.iter().zip(masks) {
        f.ensure_dims(&m.values, "frame and mask")?;
        f.ensure_dims(&frames[0], "frames")?;
    }
    Ok(())
}

/// Per-frame push-pull fill, then each filled pixel averaged with the
/// spatial fills of the adjacent frames that mask the same pixel. Frames
/// with nothing unmasked take the average of the nearest frames that have
/// a spatial fill.
#[derive(Clone, Copy, Debug, Default)]
pub struct PushPullInpainter;

impl Inpainter for PushPullInpainter {
    fn inpaint(&self, frames: &[ImageRgb], masks: &[BinaryMask]) -> Result<InpaintResult> {
        check_sequence(frames, masks)?;
        let spatial: Vec<Option<ImageRgb>> = frames
            .par_iter()
            .zip(masks)
            .map(|(f, m)| {
                if m.count() == 0 {
                    return Some(f.clone());
                }
                push_pull(f, &m.values.map(|v| !v))
            })
            .collect();
        if !frames.is_empty() && spatial.iter().all(Option::is_none) {
            return Err(Error::Inpaint("every frame is fully masked".into()));
        }
        let n = frames.len();
        let mut out = Vec::with_capacity(n);
        for m in 0..n {
            let mut frame = frames[m].clone();
            if masks[m].count() == 0 {
                out.push(frame);
                continue;
            }
            // frames whose fills contribute, and whether the mask must overlap
            let (sources, need_overlap): (Vec<usize>, bool) = if spatial[m].is_some() {
                let mut s = vec![m];
                if m > 0 {
                    s.push(m - 1);
                }
                if m + 1 < n {
                    s.push(m + 1);
                }
                (s, true)
            } else {
                let mut s = Vec::new();
                for d in 1..n {
                    if m >= d && spatial[m - d].is_some() {
                        s.push(m - d);
                    }
                    if m + d < n && spatial[m + d].is_some() {
                        s.push(m + d);
                    }
                    if !s.is_empty() {
                        break;
                    }
                }
                (s, false)
            };
            for (i, px) in frame.as_mut_slice().iter_mut().enumerate() {
                if !masks[m].values.as_slice()[i] {
                    continue;
                }
                let mut acc = [0.0; 3];
                let mut count = 0.0;
                for &s in &sources {
                    if need_overlap && s != m && !masks[s].values.as_slice()[i] {
                        continue;
                    }
                    if let Some(fill) = &spatial[s] {
                        let v = fill.as_slice()[i];
                        for k in 0..3 {
                            acc[k] += v[k];
                        }
                        count += 1.0;
                    }
                }
                *px = [acc[0] / count, acc[1] / count, acc[2] / count];
            }
            out.push(frame);
        }
        Ok(InpaintResult { frames: out })
    }
}

/// Runs an external program on a staging directory.
///
/// The directory receives `frame_NN.png` (16-bit RGB) and `mask_NN.png`
/// (1-bit, white = fill) for `NN = 00, 01, ...`; the program is invoked as
/// `program [args...] <staging_dir>` and must write `out_NN.png` (8- or
/// 16-bit RGB) for every frame. Unmasked pixels of its output are replaced
/// by the input frame.
#[derive(Clone, Debug)]
pub struct ExternalInpainter {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub staging: PathBuf,
}

impl ExternalInpainter {
    pub fn frame_path(dir: &Path, kind: &str, index: usize) -> PathBuf {
        dir.join(format!("{kind}_{index:02}.png"))
    }
}

impl Inpainter for ExternalInpainter {
    fn inpaint(&self, frames: &[ImageRgb], masks: &[BinaryMask]) -> Result<InpaintResult> {
        check_sequence(frames, masks)?;
        std::fs::create_dir_all(&self.staging)?;
        for (i, (f, m)) in frames.iter().zip(masks).enumerate() {
            crate::io::write_rgb16_png(&Self::frame_path(&self.staging, "frame", i), f)?;
            crate::io::write_mask_png(&Self::frame_path(&self.staging, "mask", i), &m.values)?;
        }
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&self.staging)
            .status()
            .map_err(|e| Error::Inpaint(format!("cannot run {}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Inpaint(format!("{} exited with {status}", self.program.display())));
        }
        let mut out = Vec::with_capacity(frames.len());
        for (i, (f, m)) in frames.iter().zip(masks).enumerate() {
            let filled = crate::io::read_rgb_png(&Self::frame_path(&self.staging, "out", i))?;
            filled.ensure_dims(f, "in-painter output")?;
            out.push(Grid::from_fn(f.width(), f.height(), |c, r| {
                if m.get(c, r) {
                    *filled.get(c, r)
                } else {
                    *f.get(c, r)
                }
            }));
        }
        Ok(InpaintResult { frames: out })
    }
}

/// In-paints with [`PushPullInpainter`].
pub fn inpaint_sequence(renders: &[ImageRgb], masks: &[BinaryMask]) -> Result<InpaintResult> {
    PushPullInpainter.inpaint(renders, masks)
}

fn video_check(renders: &[ImageRgb], inpainted: &InpaintResult, masks: &[BinaryMask]) -> Result<()> {
    check_sequence(renders, masks)?;
    if inpainted.frames.len() != renders.len() {
        return Err(mismatch("in-painted sequence length differs from renders"));
    }
    for (a, b) in renders.iter().zip(&inpainted.frames) {
        a.ensure_dims(b, "render and in-painted frame")?;
    }
    Ok(())
}

/// Sum over frames and masked pixels of the channel-mean absolute
/// difference, divided by the total masked pixel count (0 when nothing is
/// masked).
pub fn video_loss(renders: &[ImageRgb], inpainted: &InpaintResult, masks: &[BinaryMask]) -> Result<f64> {
    video_check(renders, inpainted, masks)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((r, t), m) in renders.iter().zip(&inpainted.frames).zip(masks) {
        for ((a, b), on) in r.iter().zip(t.iter()).zip(m.values.iter()) {
            if *on {
                sum += (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>() / 3.0;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Gradient of [`video_loss`] with respect to each render; in-painted
/// frames are constants.
pub fn video_loss_grad(renders: &[ImageRgb], inpainted: &InpaintResult, masks: &[BinaryMask]) -> Result<Vec<ImageRgb>> {
    video_check(renders, inpainted, masks)?;
    let count: usize = masks.iter().map(BinaryMask::count).sum();
    let mut out = Vec::with_capacity(renders.len());
    for ((r, t), m) in renders.iter().zip(&inpainted.frames).zip(masks) {
        let mut g = Grid::filled(r.width(), r.height(), [0.0; 3]);
        if count > 0 {
            for (((gi, a), b), on) in g.as_mut_slice().iter_mut().zip(r.iter()).zip(t.iter()).zip(m.values.iter()) {
                if *on {
                    for k in 0..3 {
                        let d = a[k] - b[k];
                        gi[k] = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / (3.0 * count as f64);
                    }
                }
            }
        }
        out.push(g);
    }
    Ok(out)
}

impl Trainer {
    /// One refinement step: the cycle branch at `cam1` plus the video loss
    /// on the aggregated canonical set rendered along the arc from the
    /// canonical view to `cam1`, applied at `learning_rate * lr_scale`.
    pub fn refine_step(&mut self, scene: usize, input: &crate::lift::RgbdInput, cam1: &Camera, lr_scale: f64) -> Result<LossReport> {
        let g = self.refine_gradients(scene, input, cam1)?;
        self.apply(&g, lr_scale)?;
        Ok(g.report)
    }

    pub fn refine_gradients(&self, scene: usize, input: &crate::lift::RgbdInput, cam1: &Camera) -> Result<Gradients> {
        let fwd = self.cycle_forward(scene, input, cam1)?;
        let (mut report, mut buf_hat0, buf_hat1) = self.cycle_losses(input, &fwd)?;
        let th = self.config.thresholds;
        let bg = self.config.background;
        let arc = ArcSequence::render(&fwd.hat0.merged_set, sample_arc(&input.camera, cam1, ARC_FRAMES)?, &th, bg)?;
        let colors = arc.colors();
        let inpainted = self.inpainter.inpaint(&colors, &arc.masks)?;
        report.video = Some(video_loss(&colors, &inpainted, &arc.masks)?);
        report.weighted_total = total_loss(Branch::Novel, &report, &self.config.weights)?;
        let grads = video_loss_grad(&colors, &inpainted, &arc.masks)?;
        let buffers = arc
            .cameras
            .par_iter()
            .zip(grads.into_par_iter())
            .zip(arc.masks.par_iter())
            .map(|((cam, g), m)| {
                if m.count() == 0 {
                    return Ok(None);
                }
                let mut up = RenderGrads::zeros(g.width(), g.height());
                up.color = g;
                rasterize_backward(&fwd.hat0.merged_set, cam, bg, &up).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        for b in buffers.iter().flatten() {
            buf_hat0.add_assign(b);
        }
        let (params, _) = self.cycle_backward(&fwd, &buf_hat0, &buf_hat1, false)?;
        Ok(Gradients { report, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::orbit_rotation;
    use proptest::prelude::*;

    fn one(alpha: f64, angle_deg: f64) -> bool {
        let a = Grid::filled(1, 1, alpha);
        let t = angle_deg.to_radians();
        let n = Grid::filled(1, 1, Vector3::new(t.sin(), 0.0, -t.cos()));
        let v = Grid::filled(1, 1, Vector3::new(0.0, 0.0, -1.0));
        artifact_mask(&a, &n, &v, &Thresholds::default()).unwrap().get(0, 0)
    }

    #[test]
    fn artifact_examples() {
        assert!(one(0.2, 10.0));
        assert!(!one(0.9, 10.0));
        assert!(!one(0.2, 80.0));
    }

    proptest! {
        #[test]
        fn artifact_mask_monotone(alpha in 0.0..1.0f64, angle in 0.0..90.0f64, ta in 0.05..0.9f64, tt in 0.05..1.0f64, da in 0.0..0.09f64, dt in 0.0..0.5f64) {
            let a = Grid::filled(1, 1, alpha);
            let t = angle.to_radians();
            let n = Grid::filled(1, 1, Vector3::new(t.sin(), 0.0, -t.cos()));
            let v = Grid::filled(1, 1, Vector3::new(0.0, 0.0, -1.0));
            let lo = Thresholds { tau: 0.5, tau_artifact: ta, tau_theta: tt };
            let hi = Thresholds { tau: 0.5, tau_artifact: ta + da, tau_theta: tt + dt };
            if artifact_mask(&a, &n, &v, &lo).unwrap().get(0, 0) {
                prop_assert!(artifact_mask(&a, &n, &v, &hi).unwrap().get(0, 0));
            }
        }
    }

    fn cam() -> Camera {
        Camera::centered(16, 16, 14.0).unwrap()
    }

    #[test]
    fn arc_examples() {
        let c0 = cam();
        assert!(sample_arc(&c0, &c0, 16).unwrap().iter().all(|c| *c == c0));
        let pivot = Vector3::new(0.0, 0.0, 2.0);
        let c1 = c0.orbit(&pivot, 30f64.to_radians(), 15f64.to_radians());
        let arc = sample_arc(&c0, &c1, 16).unwrap();
        assert_eq!(arc.len(), 16);
        assert_eq!(arc[0], c0);
        assert_eq!(arc[15], c1);
        for (k, c) in arc.iter().enumerate() {
            let o = c0.world_to_camera.rotation * c.world_to_camera.rotation.transpose();
            let (yaw, pitch) = orbit_angles(&o).unwrap();
            assert!((yaw.to_degrees() - 2.0 * k as f64).abs() < 1e-9);
            assert!((pitch.to_degrees() - k as f64).abs() < 1e-9);
            let expect = c0.orbit(&pivot, (2.0 * k as f64).to_radians(), (k as f64).to_radians());
            assert!((c.world_to_camera.translation - expect.world_to_camera.translation).norm() < 1e-9);
        }
        let mut other = c1;
        other.fx += 1.0;
        assert!(sample_arc(&c0, &other, 16).is_err());
        let rolled = c0.with_pose(crate::camera::RigidTransform {
            rotation: nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 0.2).into_inner() * orbit_rotation(0.1, 0.0),
            translation: Vector3::zeros(),
        });
        assert!(sample_arc(&c0, &rolled, 16).is_err());
    }

    fn masks(n: usize, w: usize, h: usize, f: impl Fn(usize, usize, usize) -> bool) -> Vec<BinaryMask> {
        (0..n).map(|m| BinaryMask::new(Grid::from_fn(w, h, |c, r| f(m, c, r)), 0)).collect()
    }

    #[test]
    fn inpaint_passthrough_and_constant() {
        let frames: Vec<ImageRgb> = (0..16).map(|m| Grid::from_fn(8, 8, |c, r| [c as f64 * 0.1, r as f64 * 0.1, m as f64 * 0.01])).collect();
        let none = masks(16, 8, 8, |_, _, _| false);
        assert_eq!(inpaint_sequence(&frames, &none).unwrap().frames, frames);

        let constant: Vec<ImageRgb> = (0..16).map(|_| Grid::filled(8, 8, [0.3, 0.6, 0.9])).collect();
        let single = masks(16, 8, 8, |m, c, r| m == 4 && c == 3 && r == 5);
        let out = inpaint_sequence(&constant, &single).unwrap();
        for (a, b) in out.frames[4].get(3, 5).iter().zip([0.3, 0.6, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inpaint_disk_on_gradient() {
        let (w, h) = (32, 32);
        let truth = |c: usize, r: usize| [0.2 + 0.02 * c as f64, 0.1 + 0.015 * r as f64, 0.5];
        let frames: Vec<ImageRgb> = (0..16).map(|_| Grid::from_fn(w, h, truth)).collect();
        let disk = |c: usize, r: usize| (c as f64 - 15.5).powi(2) + (r as f64 - 14.0).powi(2) < 36.0;
        let ms = masks(16, w, h, |_, c, r| disk(c, r));
        let out = inpaint_sequence(&frames, &ms).unwrap();
        for (f, m) in out.frames.iter().zip(&frames) {
            let (mut err, mut mag) = (0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    if disk(c, r) {
                        for k in 0..3 {
                            err += (f.get(c, r)[k] - truth(c, r)[k]).abs();
                            mag += truth(c, r)[k].abs();
                        }
                    } else {
                        assert_eq!(f.get(c, r), m.get(c, r));
                    }
                }
            }
            assert!(err / mag < 0.1, "relative error {}", err / mag);
        }
    }

    #[test]
    fn inpaint_fully_masked_frames() {
        let frames: Vec<ImageRgb> = (0..16).map(|m| Grid::filled(4, 4, [m as f64 / 16.0; 3])).collect();
        let ms = masks(16, 4, 4, |m, _, _| m == 5);
        let out = inpaint_sequence(&frames, &ms).unwrap();
        let expect = (4.0 + 6.0) / 2.0 / 16.0;
        assert!((out.frames[5].get(1, 1)[0] - expect).abs() < 1e-12);
        let all = masks(16, 4, 4, |_, _, _| true);
        assert!(matches!(inpaint_sequence(&frames, &all), Err(Error::Inpaint(_))));
    }

    #[test]
    fn video_loss_examples() {
        let frames: Vec<ImageRgb> = (0..16).map(|_| Grid::filled(4, 4, [0.5; 3])).collect();
        let same = InpaintResult { frames: frames.clone() };
        let any = masks(16, 4, 4, |_, c, _| c == 1);
        assert_eq!(video_loss(&frames, &same, &any).unwrap(), 0.0);
        let mut other = same.clone();
        other.frames[2].set(1, 1, [0.8, 0.5, 0.5]);
        let none = masks(16, 4, 4, |_, _, _| false);
        assert_eq!(video_loss(&frames, &other, &none).unwrap(), 0.0);
        let single = masks(16, 4, 4, |m, c, r| m == 2 && c == 1 && r == 1);
        assert!((video_loss(&frames, &other, &single).unwrap() - 0.1).abs() < 1e-12);
        let mut all3 = same.clone();
        all3.frames[2].set(1, 1, [0.8, 0.8, 0.8]);
        assert!((video_loss(&frames, &all3, &single).unwrap() - 0.3).abs() < 1e-12);
        let g = video_loss_grad(&frames, &all3, &single).unwrap();
        assert_eq!(g[2].get(1, 1), &[-1.0 / 3.0; 3]);
    }
}
