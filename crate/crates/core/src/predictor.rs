//! Attribute-map predictors.
//!
//! [`DirectFit`] keeps one free table of attribute offsets per (scene,
//! slot). [`TinyConv`] is a shared three-layer 3x3 convolutional network
//! over RGB plus normalized depth. Both add their output to
//! [`AttributeMaps::initial`], so a freshly constructed predictor
//! reproduces its input.

use nalgebra::Vector4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{invalid, mismatch, Result};
use crate::lift::{AttributeMaps, RgbdInput};

/// Which input a prediction is made for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    /// The photograph itself.
    Canonical,
    /// A render of the canonical lift from a sampled novel camera.
    Novel,
}

impl Slot {
    pub fn index(self) -> usize {
        match self {
            Slot::Canonical => 0,
            Slot::Novel => 1,
        }
    }

    /// View id used for the provenance of the lifted set.
    pub fn view(self) -> u32 {
        self.index() as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SlotKey {
    pub scene: usize,
    pub slot: Slot,
}

impl SlotKey {
    pub fn new(scene: usize, slot: Slot) -> Self {
        Self { scene, slot }
    }
}

/// Anything that turns an RGB-D input into attribute maps.
pub trait MapSource: Sync {
    fn predict_maps(&self, input: &RgbdInput, key: SlotKey) -> Result<AttributeMaps>;

    /// Offset bound used when lifting this source's maps.
    fn clamp_offset(&self, input: &RgbdInput) -> f64 {
        input.default_clamp_offset()
    }
}

/// [`AttributeMaps::initial`] for every input.
#[derive(Clone, Copy, Debug, Default)]
pub struct InitialMaps;

impl MapSource for InitialMaps {
    fn predict_maps(&self, input: &RgbdInput, _key: SlotKey) -> Result<AttributeMaps> {
        Ok(AttributeMaps::initial(input))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    DirectFit,
    TinyConv,
}

impl PredictorKind {
    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::DirectFit => "direct_fit",
            PredictorKind::TinyConv => "tiny_conv",
        }
    }
}

/// A trainable [`MapSource`] with a flat parameter vector.
pub trait Predictor: MapSource + Send {
    fn kind(&self) -> PredictorKind;
    /// Shape metadata stored in checkpoints.
    fn dims(&self) -> Vec<u32>;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Gradient of a loss with respect to the parameters, given its
    /// gradient with respect to the maps predicted for `input` and `key`.
    fn backward(&self, input: &RgbdInput, key: SlotKey, grad_maps: &AttributeMaps) -> Result<Vec<f64>>;
}

/// Free per-pixel attribute offsets, one table per (scene, slot).
#[derive(Clone, Debug, PartialEq)]
pub struct DirectFit {
    width: usize,
    height: usize,
    scenes: usize,
    params: Vec<f64>,
}

impl DirectFit {
    pub fn new(width: usize, height: usize, scenes: usize) -> Result<Self> {
        if width == 0 || height == 0 || scenes == 0 {
            return Err(invalid("DirectFit needs non-empty images and at least one scene"));
        }
        Ok(Self {
            width,
            height,
            scenes,
            params: vec![0.0; scenes * 2 * width * height * AttributeMaps::CHANNELS],
        })
    }

    pub fn from_params(width: usize, height: usize, scenes: usize, params: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(width, height, scenes)?;
        if params.len() != out.params.len() {
            return Err(mismatch(format!(
                "DirectFit {width}x{height}x{scenes} expects {} parameters, got {}",
                out.params.len(),
                params.len()
            )));
        }
        out.params = params;
        Ok(out)
    }

    fn table_len(&self) -> usize {
        self.width * self.height * AttributeMaps::CHANNELS
    }

    fn offset(&self, input: &RgbdInput, key: SlotKey) -> Result<usize> {
        if (input.width(), input.height()) != (self.width, self.height) {
            return Err(mismatch(format!(
                "DirectFit built for {}x{}, input is {}x{}",
                self.width,
                self.height,
                input.width(),
                input.height()
            )));
        }
        if key.scene >= self.scenes {
            return Err(invalid(format!("scene {} out of range ({} scenes)", key.scene, self.scenes)));
        }
        Ok((key.scene * 2 + key.slot.index()) * self.table_len())
    }

    /// The table for `key`, laid out pixel-major with
    /// [`AttributeMaps::CHANNELS`] entries per pixel.
    pub fn table_mut(&mut self, scene: usize, slot: Slot) -> &mut [f64] {
        let len = self.table_len();
        let start = (scene * 2 + slot.index()) * len;
        &mut self.params[start..start + len]
    }
}

impl MapSource for DirectFit {
    fn predict_maps(&self, input: &RgbdInput, key: SlotKey) -> Result<AttributeMaps> {
        let start = self.offset(input, key)?;
        let table = &self.params[start..start + self.table_len()];
        let mut maps = AttributeMaps::initial(input);
        for (i, chunk) in table.chunks_exact(AttributeMaps::CHANNELS).enumerate() {
            for (k, v) in chunk.iter().enumerate() {
                *maps.channel_mut(i, k) += v;
            }
        }
        Ok(maps)
    }
}

impl Predictor for DirectFit {
    fn kind(&self) -> PredictorKind {
        PredictorKind::DirectFit
    }

    fn dims(&self) -> Vec<u32> {
        vec![self.width as u32, self.height as u32, self.scenes as u32]
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backward(&self, input: &RgbdInput, key: SlotKey, grad_maps: &AttributeMaps) -> Result<Vec<f64>> {
        let start = self.offset(input, key)?;
        grad_maps.validate(self.width, self.height)?;
        let mut g = vec![0.0; self.params.len()];
        let table = &mut g[start..start + self.table_len()];
        for (i, chunk) in table.chunks_exact_mut(AttributeMaps::CHANNELS).enumerate() {
            for (k, v) in chunk.iter_mut().enumerate() {
                *v = grad_maps.channel(i, k);
            }
        }
        Ok(g)
    }
}

/// One 3x3 same-padded convolution. Weights are laid out
/// `[out][in][ky][kx]`, activations pixel-major with channels innermost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    /// Offset of the weights in the parameter vector; biases follow them.
    start: usize,
}

impl ConvLayer {
    fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    fn len(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn forward(&self, params: &[f64], input: &[f64], w: usize, h: usize, relu: bool) -> Vec<f64> {
        let weights = &params[self.start..self.start + self.weight_len()];
        let bias = &params[self.start + self.weight_len()..self.start + self.len()];
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![0.0; w * h * cout];
        out.par_chunks_mut(w * cout).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let o = &mut row[x * cout..(x + 1) * cout];
                o.copy_from_slice(bias);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = &input[(sy as usize * w + sx as usize) * cin..][..cin];
                        for (co, ov) in o.iter_mut().enumerate() {
                            let wk = &weights[co * cin * 9..];
                            let mut acc = 0.0;
                            for (ci, s) in src.iter().enumerate() {
                                acc += wk[ci * 9 + ky * 3 + kx] * s;
                            }
                            *ov += acc;
                        }
                    }
                }
                if relu {
                    for v in o.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
        });
        out
    }

    /// Returns the gradient with respect to the layer input and adds the
    /// parameter gradient into `grad_params`. `grad_out` must already be
    /// masked by the activation derivative.
    fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        grad_out: &[f64],
        w: usize,
        h: usize,
        grad_params: &mut [f64],
    ) -> Vec<f64> {
        let weights = &params[self.start..self.start + self.weight_len()];
        let (cin, cout) = (self.cin, self.cout);
        let wl = self.weight_len();
        // Per-row parameter gradients, summed in row order afterwards.
        let partials: Vec<Vec<f64>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut gp = vec![0.0; self.len()];
                for x in 0..w {
                    let go = &grad_out[(y * w + x) * cout..][..cout];
                    for (co, g) in go.iter().enumerate() {
                        gp[wl + co] += g;
                    }
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = &input[(sy as usize * w + sx as usize) * cin..][..cin];
                            for (co, g) in go.iter().enumerate() {
                                if *g == 0.0 {
                                    continue;
                                }
                                let gw = &mut gp[co * cin * 9..];
                                for (ci, s) in src.iter().enumerate() {
                                    gw[ci * 9 + ky * 3 + kx] += g * s;
                                }
                            }
                        }
                    }
                }
                gp
            })
            .collect();
        let target = &mut grad_params[self.start..self.start + self.len()];
        for gp in &partials {
            for (t, v) in target.iter_mut().zip(gp) {
                *t += v;
            }
        }
        let mut grad_in = vec![0.0; w * h * cin];
        grad_in.par_chunks_mut(w * cin).enumerate().for_each(|(sy, row)| {
            for sx in 0..w {
                let gi = &mut row[sx * cin..(sx + 1) * cin];
                for ky in 0..3 {
                    // output pixel y = sy - ky + 1 reads this input through tap ky
                    let y = sy as isize - ky as isize + 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let x = sx as isize - kx as isize + 1;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let go = &grad_out[(y as usize * w + x as usize) * cout..][..cout];
                        for (co, g) in go.iter().enumerate() {
                            if *g == 0.0 {
                                continue;
                            }
                            let wk = &weights[co * cin * 9..];
                            for (ci, v) in gi.iter_mut().enumerate() {
                                *v += g * wk[ci * 9 + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        });
        grad_in
    }
}

/// Shared convolutional predictor: 4 input channels (RGB and depth over
/// its median minus one), two hidden ReLU layers of `hidden` channels and a
/// linear 14-channel head initialized to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyConv {
    hidden: usize,
    params: Vec<f64>,
}

pub const TINY_CONV_INPUTS: usize = 4;
pub const TINY_CONV_HIDDEN: usize = 16;

impl TinyConv {
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(invalid("TinyConv needs at least one hidden channel"));
        }
        let mut out = Self {
            hidden,
            params: Vec::new(),
        };
        let layers = out.layers();
        out.params = vec![0.0; layers[2].start + layers[2].len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers[..2] {
            // He initialization for ReLU layers
            let std = (2.0 / (layer.cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut out.params[layer.start..layer.start + layer.weight_len()] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(out)
    }

    pub fn from_params(hidden: usize, params: Vec<f64>) -> Result<Self> {
        let mut out = Self::new(hidden, 0)?;
        if params.len() != out.params.len() {
            return Err(mismatch(format!(
                "TinyConv with {hidden} hidden channels expects {} parameters, got {}",
                out.params.len(),
                params.len()
            )));
        }
        out.params = params;
        Ok(out)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn layers(&self) -> [ConvLayer; 3] {
        let l1 = ConvLayer {
            cin: TINY_CONV_INPUTS,
            cout: self.hidden,
            start: 0,
        };
        let l2 = ConvLayer {
            cin: self.hidden,
            cout: self.hidden,
            start: l1.len(),
        };
        let l3 = ConvLayer {
            cin: self.hidden,
            cout: AttributeMaps::CHANNELS,
            start: l1.len() + l2.len(),
        };
        [l1, l2, l3]
    }

    fn features(input: &RgbdInput) -> Vec<f64> {
        let median = input.median_depth();
        let mut f = Vec::with_capacity(input.image.len() * TINY_CONV_INPUTS);
        for (rgb, d) in input.image.iter().zip(input.depth.iter()) {
            f.extend_from_slice(rgb);
            f.push(d / median - 1.0);
        }
        f
    }

    /// Activations of the two hidden layers and the raw head output.
    fn forward(&self, input: &RgbdInput) -> [Vec<f64>; 4] {
        let (w, h) = (input.width(), input.height());
        let [l1, l2, l3] = self.layers();
        let x = Self::features(input);
        let a1 = l1.forward(&self.params, &x, w, h, true);
        let a2 = l2.forward(&self.params, &a1, w, h, true);
        let out = l3.forward(&self.params, &a2, w, h, false);
        [x, a1, a2, out]
    }

    fn head_scale(k: usize, clamp_offset: f64) -> f64 {
        if k < 3 {
            clamp_offset
        } else {
            1.0
        }
    }
}

impl MapSource for TinyConv {
    fn predict_maps(&self, input: &RgbdInput, _key: SlotKey) -> Result<AttributeMaps> {
        let [_, _, _, out] = self.forward(input);
        let clamp = self.clamp_offset(input);
        let mut maps = AttributeMaps::initial(input);
        for (i, o) in out.chunks_exact(AttributeMaps::CHANNELS).enumerate() {
            for (k, v) in o.iter().enumerate() {
                *maps.channel_mut(i, k) += Self::head_scale(k, clamp) * v;
            }
        }
        debug_assert!(maps.rotation.iter().all(|q| *q != Vector4::zeros()));
        Ok(maps)
    }
}

impl Predictor for TinyConv {
    fn kind(&self) -> PredictorKind {
        PredictorKind::TinyConv
    }

    fn dims(&self) -> Vec<u32> {
        vec![self.hidden as u32]
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backward(&self, input: &RgbdInput, _key: SlotKey, grad_maps: &AttributeMaps) -> Result<Vec<f64>> {
        let (w, h) = (input.width(), input.height());
        grad_maps.validate(w, h)?;
        let [x, a1, a2, _] = self.forward(input);
        let [l1, l2, l3] = self.layers();
        let clamp = self.clamp_offset(input);
        let mut g_out = vec![0.0; w * h * AttributeMaps::CHANNELS];
        for (i, o) in g_out.chunks_exact_mut(AttributeMaps::CHANNELS).enumerate() {
            for (k, v) in o.iter_mut().enumerate() {
                *v = Self::head_scale(k, clamp) * grad_maps.channel(i, k);
            }
        }
        let mut g = vec![0.0; self.params.len()];
        let mut g2 = l3.backward(&self.params, &a2, &g_out, w, h, &mut g);
        for (gv, a) in g2.iter_mut().zip(&a2) {
            if *a <= 0.0 {
                *gv = 0.0;
            }
        }
        let mut g1 = l2.backward(&self.params, &a1, &g2, w, h, &mut g);
        for (gv, a) in g1.iter_mut().zip(&a1) {
            if *a <= 0.0 {
                *gv = 0.0;
            }
        }
        l1.backward(&self.params, &x, &g1, w, h, &mut g);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::grid::Grid;
    use rand::Rng;

    fn input(seed: u64, w: usize, h: usize) -> RgbdInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]);
        let depth = Grid::from_fn(w, h, |_, _| rng.random_range(1.5..2.5));
        RgbdInput::new(image, depth, Camera::centered(w, h, 8.0).unwrap()).unwrap()
    }

    fn random_maps_grad(seed: u64, w: usize, h: usize) -> AttributeMaps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = AttributeMaps::zeros(w, h);
        for i in 0..w * h {
            for k in 0..AttributeMaps::CHANNELS {
                *g.channel_mut(i, k) = rng.random_range(-1.0..1.0);
            }
        }
        g
    }

    fn dot(a: &AttributeMaps, b: &AttributeMaps) -> f64 {
        let (w, h) = a.dims();
        let mut s = 0.0;
        for i in 0..w * h {
            for k in 0..AttributeMaps::CHANNELS {
                s += a.channel(i, k) * b.channel(i, k);
            }
        }
        s
    }

    #[test]
    fn fresh_predictors_reproduce_initial_maps() {
        let x = input(1, 5, 4);
        let initial = AttributeMaps::initial(&x);
        let key = SlotKey::new(0, Slot::Canonical);
        assert_eq!(DirectFit::new(5, 4, 1).unwrap().predict_maps(&x, key).unwrap(), initial);
        assert_eq!(TinyConv::new(8, 3).unwrap().predict_maps(&x, key).unwrap(), initial);
    }

    #[test]
    fn direct_fit_tables_are_independent() {
        let x = input(2, 3, 3);
        let mut p = DirectFit::new(3, 3, 2).unwrap();
        p.table_mut(1, Slot::Novel)[6] = 0.5;
        let k = |s, slot| SlotKey::new(s, slot);
        let base = AttributeMaps::initial(&x);
        assert_eq!(p.predict_maps(&x, k(0, Slot::Novel)).unwrap(), base);
        assert_eq!(p.predict_maps(&x, k(1, Slot::Canonical)).unwrap(), base);
        let m = p.predict_maps(&x, k(1, Slot::Novel)).unwrap();
        assert_eq!(m.opacity_raw.as_slice()[0], base.opacity_raw.as_slice()[0] + 0.5);
        assert!(p.predict_maps(&x, k(2, Slot::Canonical)).is_err());
        assert!(p.predict_maps(&input(2, 4, 3), k(0, Slot::Canonical)).is_err());
    }

    fn check_backward(p: &mut dyn Predictor, x: &RgbdInput, key: SlotKey, indices: &[usize]) {
        let g_maps = random_maps_grad(7, x.width(), x.height());
        let g = p.backward(x, key, &g_maps).unwrap();
        let step = 1e-6;
        for &j in indices {
            let orig = p.params()[j];
            p.params_mut()[j] = orig + step;
            let fp = dot(&p.predict_maps(x, key).unwrap(), &g_maps);
            p.params_mut()[j] = orig - step;
            let fm = dot(&p.predict_maps(x, key).unwrap(), &g_maps);
            p.params_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!((fd - g[j]).abs() < tol, "param {j}: fd {fd} analytic {}", g[j]);
        }
    }

    #[test]
    fn direct_fit_backward_matches_differences() {
        let x = input(3, 4, 3);
        let mut p = DirectFit::new(4, 3, 2).unwrap();
        let idx: Vec<usize> = (0..p.params().len()).step_by(7).collect();
        check_backward(&mut p, &x, SlotKey::new(1, Slot::Canonical), &idx);
    }

    #[test]
    fn tiny_conv_backward_matches_differences() {
        let x = input(4, 6, 5);
        let mut p = TinyConv::new(5, 11).unwrap();
        // give the head non-zero weights so every layer receives gradient
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let len = p.params().len();
        let [_, _, l3] = p.layers();
        for v in &mut p.params_mut()[l3.start..len] {
            *v = rng.random_range(-0.3..0.3);
        }
        let g = p.backward(&x, SlotKey::new(0, Slot::Novel), &random_maps_grad(7, 6, 5)).unwrap();
        assert!(g[..l3.start].iter().any(|v| *v != 0.0));
        let idx: Vec<usize> = (0..len).step_by(5).collect();
        check_backward(&mut p, &x, SlotKey::new(0, Slot::Novel), &idx);
    }

    #[test]
    fn parameter_roundtrip() {
        let p = TinyConv::new(4, 1).unwrap();
        assert_eq!(TinyConv::from_params(4, p.params().to_vec()).unwrap(), p);
        assert!(TinyConv::from_params(4, vec![0.0; 3]).is_err());
        let d = DirectFit::new(2, 2, 1).unwrap();
        assert_eq!(DirectFit::from_params(2, 2, 1, d.params().to_vec()).unwrap(), d);
    }
}
