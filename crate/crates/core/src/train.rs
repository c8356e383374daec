//! Stage-one training: novel-camera sampling, the canonical and novel
//! branches of the objective, and the optimizer loop.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_pair, inference_aggregate, AggregationOutcome};
use crate::camera::Camera;
use crate::error::{invalid, Error, Result};
use crate::gaussian::{GaussianSet, LossWeights, Thresholds};
use crate::grid::Rgb;
use crate::lift::{lift_backward, lift_pixel_aligned, AttributeMaps, RgbdInput};
use crate::losses::{
    baseline_total, cycle_loss, cycle_loss_grad, novel_term, photometric_loss, photometric_loss_grad, recon_loss,
    recon_loss_grad, total_loss, tv_loss, tv_loss_grad, Branch, LossReport, PerceptualSurrogate, PyramidL1,
    StopGradBoundary,
};
use crate::metrics::{hole_coverage, nfs_surrogate, psnr, MetricsRecord};
use crate::predictor::{DirectFit, Predictor, PredictorKind, Slot, SlotKey, TinyConv, TINY_CONV_HIDDEN};
use crate::raster::{rasterize, rasterize_backward, GradientBuffer, RenderGrads, RenderTargets};
use crate::refine::{Inpainter, PushPullInpainter};

/// Yaw and pitch spreads (standard deviations, radians) of novel cameras.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSampler {
    pub yaw_spread: f64,
    pub pitch_spread: f64,
}

impl Default for CameraSampler {
    fn default() -> Self {
        Self {
            yaw_spread: 0.3,
            pitch_spread: 0.15,
        }
    }
}

impl CameraSampler {
    pub fn validate(&self) -> Result<()> {
        if !(self.yaw_spread >= 0.0 && self.pitch_spread >= 0.0)
            || !self.yaw_spread.is_finite()
            || !self.pitch_spread.is_finite()
        {
            return Err(invalid("camera spreads must be finite and >= 0"));
        }
        Ok(())
    }

    /// `(yaw, pitch)`, each normal with the configured spread and
    /// truncated to two spreads.
    pub fn sample_angles<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let yaw = truncated_normal(self.yaw_spread, rng);
        let pitch = truncated_normal(self.pitch_spread, rng);
        (yaw, pitch)
    }
}

/// Normal(0, std) conditioned on `|x| <= 2 std`, by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, std).expect("finite spread");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Orbit pivot in the canonical camera frame: the principal point
/// unprojected at the median input depth.
pub fn orbit_pivot(input: &RgbdInput) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, input.median_depth())
}

/// The canonical camera orbited about [`orbit_pivot`] by sampled angles.
pub fn sample_novel_camera<R: Rng + ?Sized>(input: &RgbdInput, sampler: &CameraSampler, rng: &mut R) -> Camera {
    let (yaw, pitch) = sampler.sample_angles(rng);
    input.camera.orbit(&orbit_pivot(input), yaw, pitch)
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for another parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient length differs from parameters");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

fn default_eval_yaws() -> Vec<f64> {
    vec![-30.0, -20.0, -10.0, 10.0, 20.0, 30.0]
}

/// Everything a training run depends on. Serialized as one flat table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub predictor: PredictorKind,
    /// Hidden channels of [`TinyConv`].
    pub hidden: usize,
    /// Stage-one steps.
    pub steps: usize,
    /// Stage-two (refinement) steps.
    pub refine_steps: usize,
    pub learning_rate: f64,
    /// Stage-two learning rate as a fraction of `learning_rate`.
    pub refine_lr_scale: f64,
    /// Probability that a step takes the canonical branch.
    pub canonical_prob: f64,
    /// `false` trains the no-aggregation baseline: novel steps apply only
    /// the regularizer and the novel-view losses to the direct render.
    pub aggregation: bool,
    pub yaw_spread: f64,
    pub pitch_spread: f64,
    #[serde(flatten)]
    pub weights: LossWeights,
    #[serde(flatten)]
    pub thresholds: Thresholds,
    pub background: Rgb,
    pub seed: u64,
    /// Evaluate image metrics every this many steps (0 disables).
    pub eval_every: usize,
    /// Signed yaw angles (degrees) at which hole coverage is evaluated.
    #[serde(default = "default_eval_yaws")]
    pub eval_yaws_deg: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sampler = CameraSampler::default();
        Self {
            predictor: PredictorKind::TinyConv,
            hidden: TINY_CONV_HIDDEN,
            steps: 2000,
            refine_steps: 0,
            learning_rate: 1e-3,
            refine_lr_scale: 0.1,
            canonical_prob: 0.5,
            aggregation: true,
            yaw_spread: sampler.yaw_spread,
            pitch_spread: sampler.pitch_spread,
            weights: LossWeights::default(),
            thresholds: Thresholds::default(),
            background: [0.0; 3],
            seed: 0,
            eval_every: 0,
            eval_yaws_deg: default_eval_yaws(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.thresholds.validate()?;
        self.sampler().validate()?;
        if !(0.0..=1.0).contains(&self.canonical_prob) {
            return Err(invalid(format!("canonical_prob must lie in [0,1], got {}", self.canonical_prob)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.refine_lr_scale >= 0.0 && self.refine_lr_scale.is_finite()) {
            return Err(invalid("refine_lr_scale must be finite and >= 0"));
        }
        if self.hidden == 0 {
            return Err(invalid("hidden must be >= 1"));
        }
        Ok(())
    }

    pub fn sampler(&self) -> CameraSampler {
        CameraSampler {
            yaw_spread: self.yaw_spread,
            pitch_spread: self.pitch_spread,
        }
    }
}

/// A pixel-aligned lift together with what produced it.
#[derive(Clone, Debug)]
pub(crate) struct Lifted {
    pub input: RgbdInput,
    pub maps: AttributeMaps,
    pub clamp: f64,
    pub key: SlotKey,
    pub set: GaussianSet,
}

impl Lifted {
    fn new(pred: &dyn Predictor, input: RgbdInput, key: SlotKey) -> Result<Self> {
        let maps = pred.predict_maps(&input, key)?;
        let clamp = pred.clamp_offset(&input);
        let set = lift_pixel_aligned(&input, &maps, clamp, key.slot.view())?;
        Ok(Self {
            input,
            maps,
            clamp,
            key,
            set,
        })
    }

    fn backward(&self, pred: &dyn Predictor, grads: &GradientBuffer) -> Result<(Vec<f64>, crate::lift::LiftGrads)> {
        let lg = lift_backward(&self.input, &self.maps, self.clamp, grads)?;
        let p = pred.backward(&self.input, self.key, &lg.maps)?;
        Ok((p, lg))
    }
}

/// Forward products of one cycle step.
#[derive(Clone, Debug)]
pub struct CycleForward {
    pub cam1: Camera,
    pub(crate) gs0: Lifted,
    pub boundary: StopGradBoundary,
    pub(crate) gs1: Option<Lifted>,
    /// Aggregated canonical set, `GS0 + GS1[M_1to0]`.
    pub hat0: AggregationOutcome,
    /// Aggregated novel set, `GS1 + GS0[M_0to1]`.
    pub hat1: AggregationOutcome,
    pub hat0_in_view1: RenderTargets,
    pub hat1_in_view0: RenderTargets,
}

impl CycleForward {
    pub fn gs0(&self) -> &GaussianSet {
        &self.gs0.set
    }

    pub fn gs1(&self) -> Option<&GaussianSet> {
        self.gs1.as_ref().map(|l| &l.set)
    }
}

/// Loss terms and the matching parameter gradient of one step.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub report: LossReport,
    pub params: Vec<f64>,
}

/// [`Gradients`] of a cycle step plus the gradient on `GS0` primitives
/// that arrived through the render feeding `GS1`.
#[derive(Clone, Debug)]
pub struct CycleGradients {
    pub report: LossReport,
    pub params: Vec<f64>,
    pub through_boundary: GradientBuffer,
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Adds a merged-set gradient to the gradients of its source sets, found
/// through each primitive's provenance.
fn route(
    buf: &GradientBuffer,
    merged: &GaussianSet,
    width: usize,
    g0: &mut GradientBuffer,
    mut g1: Option<&mut GradientBuffer>,
) {
    for (g, prov) in buf.grads.iter().zip(merged.provenance()) {
        let i = prov.row as usize * width + prov.col as usize;
        match prov.view {
            0 => g0.grads[i].add_assign(g),
            _ => g1
                .as_deref_mut()
                .expect("donor from a set that does not exist")
                .grads[i]
                .add_assign(g),
        }
    }
}

/// Lifts the canonical set, or the aggregated one when `aggregation` is
/// set, and renders it in `cam`.
pub fn render_prediction(
    pred: &dyn Predictor,
    scene: usize,
    input: &RgbdInput,
    cam: &Camera,
    aggregation: bool,
    tau: f64,
    background: Rgb,
) -> Result<RenderTargets> {
    let set = if aggregation {
        inference_aggregate(input, scene, pred, cam, tau)?.aggregated.merged_set
    } else {
        let maps = pred.predict_maps(input, SlotKey::new(scene, Slot::Canonical))?;
        lift_pixel_aligned(input, &maps, pred.clamp_offset(input), 0)?
    };
    Ok(rasterize(&set, cam, background))
}

/// Builds the predictor named by `cfg` for a corpus.
pub fn build_predictor(corpus: &[RgbdInput], cfg: &TrainConfig) -> Result<Box<dyn Predictor>> {
    let first = corpus.first().ok_or_else(|| invalid("empty corpus"))?;
    Ok(match cfg.predictor {
        PredictorKind::DirectFit => {
            if corpus.iter().any(|s| (s.width(), s.height()) != (first.width(), first.height())) {
                return Err(invalid("DirectFit needs every scene at the same resolution"));
            }
            Box::new(DirectFit::new(first.width(), first.height(), corpus.len())?)
        }
        PredictorKind::TinyConv => Box::new(TinyConv::new(cfg.hidden, cfg.seed)?),
    })
}

/// Predictor, optimizer state and loss plumbing.
pub struct Trainer {
    pub predictor: Box<dyn Predictor>,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub perceptual: Box<dyn PerceptualSurrogate>,
    /// Fills the semantic-feature loss slot.
    pub clip: Box<dyn PerceptualSurrogate>,
    pub inpainter: Box<dyn Inpainter>,
}

impl Trainer {
    pub fn new(predictor: Box<dyn Predictor>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Adam::new(predictor.params().len()),
            predictor,
            config,
            perceptual: Box::new(PyramidL1::default()),
            clip: Box::new(PyramidL1::default()),
            inpainter: Box::new(PushPullInpainter),
        })
    }

    pub fn for_corpus(corpus: &[RgbdInput], config: TrainConfig) -> Result<Self> {
        let pred = build_predictor(corpus, &config)?;
        Self::new(pred, config)
    }

    fn tau(&self) -> f64 {
        self.config.thresholds.tau
    }

    fn bg(&self) -> Rgb {
        self.config.background
    }

    /// Applies `grads` with learning rate `learning_rate * lr_scale`.
    pub fn apply(&mut self, grads: &Gradients, lr_scale: f64) -> Result<()> {
        if !grads.report.is_finite() || grads.params.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("step aborted, report {:?}", grads.report)));
        }
        let lr = self.config.learning_rate * lr_scale;
        self.optimizer.step(self.predictor.params_mut(), &grads.params, lr);
        Ok(())
    }

    /// Reconstruction of the canonical view: `recon + lambda_reg * tv(D0_hat)`.
    pub fn canonical_gradients(&self, scene: usize, input: &RgbdInput) -> Result<Gradients> {
        let pred = self.predictor.as_ref();
        let gs0 = Lifted::new(pred, input.clone(), SlotKey::new(scene, Slot::Canonical))?;
        let render = rasterize(&gs0.set, &input.camera, self.bg());
        let w = &self.config.weights;
        let mut report = LossReport {
            recon: Some(recon_loss(&render, input, self.tau())?),
            reg: Some(tv_loss(&render.depth)),
            ..LossReport::default()
        };
        report.weighted_total = total_loss(Branch::Canonical, &report, w)?;
        let mut g = recon_loss_grad(&render, input, self.tau())?;
        for (a, b) in g.depth.as_mut_slice().iter_mut().zip(tv_loss_grad(&render.depth).iter()) {
            *a += w.lambda_reg * b;
        }
        let buf = rasterize_backward(&gs0.set, &input.camera, self.bg(), &g)?;
        let (params, _) = gs0.backward(pred, &buf)?;
        Ok(Gradients { report, params })
    }

    pub fn train_step_canonical(&mut self, scene: usize, input: &RgbdInput) -> Result<LossReport> {
        let g = self.canonical_gradients(scene, input)?;
        self.apply(&g, 1.0)?;
        Ok(g.report)
    }

    /// Render-space gradient of the novel-view terms
    /// `lambda_reg * tv(D1) + lambda_novel * novel(I1)`, and their values.
    fn novel_terms(&self, input: &RgbdInput, render1: &RenderTargets, cam1: &Camera, report: &mut LossReport) -> Result<RenderGrads> {
        let w = &self.config.weights;
        let photo = photometric_loss(&input.image, &input.depth, &render1.color, &input.camera, cam1)?;
        report.photo = Some(photo.value);
        report.photo_warning = photo.warning;
        report.perp_surrogate = Some(self.perceptual.loss(&render1.color, &input.image)?);
        report.clip_surrogate = Some(self.clip.loss(&render1.color, &input.image)?);
        report.reg = Some(tv_loss(&render1.depth));
        report.novel = Some(novel_term(report, w)?);

        let (wd, hd) = render1.color.dims();
        let mut g = RenderGrads::zeros(wd, hd);
        let gp = photometric_loss_grad(&input.image, &input.depth, &render1.color, &input.camera, cam1)?;
        let gq = self.perceptual.grad(&render1.color, &input.image)?;
        let gc = self.clip.grad(&render1.color, &input.image)?;
        for (i, gi) in g.color.as_mut_slice().iter_mut().enumerate() {
            for k in 0..3 {
                gi[k] = w.lambda_novel
                    * (gp.as_slice()[i][k] + w.lambda_perp * gq.as_slice()[i][k] + w.lambda_clip * gc.as_slice()[i][k]);
            }
        }
        for (a, b) in g.depth.as_mut_slice().iter_mut().zip(tv_loss_grad(&render1.depth).iter()) {
            *a = w.lambda_reg * b;
        }
        Ok(g)
    }

    /// Steps (1)-(6) of the cycle branch at a fixed novel camera.
    pub fn cycle_forward(&self, scene: usize, input: &RgbdInput, cam1: &Camera) -> Result<CycleForward> {
        let pred = self.predictor.as_ref();
        let cam0 = &input.camera;
        let gs0 = Lifted::new(pred, input.clone(), SlotKey::new(scene, Slot::Canonical))?;
        let boundary = StopGradBoundary::new(rasterize(&gs0.set, cam1, self.bg()));
        let gs1 = match RgbdInput::from_render(boundary.render(), cam1, self.tau())? {
            Some(input1) => Some(Lifted::new(pred, input1, SlotKey::new(scene, Slot::Novel))?),
            None => None,
        };
        let empty = GaussianSet::empty();
        let gs1_set = gs1.as_ref().map(|l| &l.set).unwrap_or(&empty);
        let (hat0, hat1) = aggregate_pair(&gs0.set, gs1_set, cam0, cam1, self.tau())?;
        let hat0_in_view1 = rasterize(&hat0.merged_set, cam1, self.bg());
        let hat1_in_view0 = rasterize(&hat1.merged_set, cam0, self.bg());
        Ok(CycleForward {
            cam1: *cam1,
            gs0,
            boundary,
            gs1,
            hat0,
            hat1,
            hat0_in_view1,
            hat1_in_view0,
        })
    }

    /// Loss terms of a cycle forward and the gradients on `GS0_hat` (in
    /// view 1) and `GS1_hat` (in view 0) primitives.
    pub(crate) fn cycle_losses(
        &self,
        input: &RgbdInput,
        fwd: &CycleForward,
    ) -> Result<(LossReport, GradientBuffer, GradientBuffer)> {
        let mut report = LossReport {
            cycle: Some(cycle_loss(&fwd.hat1_in_view0, input, self.tau())?),
            ..LossReport::default()
        };
        let g1 = self.novel_terms(input, &fwd.hat0_in_view1, &fwd.cam1, &mut report)?;
        report.weighted_total = total_loss(Branch::Novel, &report, &self.config.weights)?;
        let g0 = cycle_loss_grad(&fwd.hat1_in_view0, input, self.tau())?;
        let buf_hat1 = rasterize_backward(&fwd.hat1.merged_set, &input.camera, self.bg(), &g0)?;
        let buf_hat0 = rasterize_backward(&fwd.hat0.merged_set, &fwd.cam1, self.bg(), &g1)?;
        Ok((report, buf_hat0, buf_hat1))
    }

    /// Pulls gradients on the two aggregated sets back to the predictor.
    ///
    /// With `bypass` unset the render feeding `GS1` is a stop-gradient
    /// boundary. With `bypass` set, the gradient reaching `GS1`'s input
    /// image and (solid-pixel) depth is rendered back into `GS0`; the
    /// predictor's own dependence on its input is not followed. The bypass
    /// exists to test the boundary.
    pub(crate) fn cycle_backward(
        &self,
        fwd: &CycleForward,
        buf_hat0: &GradientBuffer,
        buf_hat1: &GradientBuffer,
        bypass: bool,
    ) -> Result<(Vec<f64>, GradientBuffer)> {
        let pred = self.predictor.as_ref();
        let width = fwd.gs0.input.width();
        let mut g0 = GradientBuffer::zeros(fwd.gs0.set.len());
        let mut g1 = fwd.gs1.as_ref().map(|l| GradientBuffer::zeros(l.set.len()));
        route(buf_hat0, &fwd.hat0.merged_set, width, &mut g0, g1.as_mut());
        route(buf_hat1, &fwd.hat1.merged_set, width, &mut g0, g1.as_mut());

        let mut params = vec![0.0; pred.params().len()];
        let mut through = GradientBuffer::zeros(fwd.gs0.set.len());
        if let (Some(gs1), Some(g1)) = (&fwd.gs1, &g1) {
            let (p1, lg1) = gs1.backward(pred, g1)?;
            add_into(&mut params, &p1);
            let rendered = fwd.boundary.render();
            let mut upstream = RenderGrads::zeros(rendered.width(), rendered.height());
            upstream.color = lg1.image;
            for ((u, d), a) in upstream
                .depth
                .as_mut_slice()
                .iter_mut()
                .zip(lg1.depth.iter())
                .zip(rendered.alpha.iter())
            {
                if *a >= self.tau() {
                    *u = *d;
                }
            }
            let upstream = if bypass { upstream } else { fwd.boundary.backward(&upstream) };
            through = rasterize_backward(&fwd.gs0.set, &fwd.cam1, self.bg(), &upstream)?;
            g0.add_assign(&through);
        }
        let (p0, _) = fwd.gs0.backward(pred, &g0)?;
        add_into(&mut params, &p0);
        Ok((params, through))
    }

    /// Full cycle-branch gradient at a fixed novel camera.
    pub fn cycle_gradients(&self, scene: usize, input: &RgbdInput, cam1: &Camera, bypass: bool) -> Result<CycleGradients> {
        let fwd = self.cycle_forward(scene, input, cam1)?;
        let (report, buf_hat0, buf_hat1) = self.cycle_losses(input, &fwd)?;
        let (params, through_boundary) = self.cycle_backward(&fwd, &buf_hat0, &buf_hat1, bypass)?;
        Ok(CycleGradients {
            report,
            params,
            through_boundary,
        })
    }

    /// Novel branch without aggregation or cycle supervision: the novel
    /// losses and the regularizer act on the direct render of `GS0`.
    pub fn baseline_gradients(&self, scene: usize, input: &RgbdInput, cam1: &Camera) -> Result<Gradients> {
        let pred = self.predictor.as_ref();
        let gs0 = Lifted::new(pred, input.clone(), SlotKey::new(scene, Slot::Canonical))?;
        let render = rasterize(&gs0.set, cam1, self.bg());
        let mut report = LossReport::default();
        let g = self.novel_terms(input, &render, cam1, &mut report)?;
        report.weighted_total = baseline_total(&report, &self.config.weights)?;
        let buf = rasterize_backward(&gs0.set, cam1, self.bg(), &g)?;
        let (params, _) = gs0.backward(pred, &buf)?;
        Ok(Gradients { report, params })
    }

    /// Novel-branch step at `cam1`: cycle-aggregative when
    /// `config.aggregation` is set, the baseline otherwise.
    pub fn novel_step_at(&mut self, scene: usize, input: &RgbdInput, cam1: &Camera) -> Result<LossReport> {
        let g = if self.config.aggregation {
            let c = self.cycle_gradients(scene, input, cam1, false)?;
            Gradients {
                report: c.report,
                params: c.params,
            }
        } else {
            self.baseline_gradients(scene, input, cam1)?
        };
        self.apply(&g, 1.0)?;
        Ok(g.report)
    }

    /// Samples a novel camera and takes one novel-branch step.
    pub fn train_step_cycle<R: Rng + ?Sized>(&mut self, scene: usize, input: &RgbdInput, rng: &mut R) -> Result<LossReport> {
        let cam1 = sample_novel_camera(input, &self.config.sampler(), rng);
        self.novel_step_at(scene, input, &cam1)
    }

    /// Canonical PSNR, hole coverage per evaluation yaw and the mean depth
    /// histogram entropy over those views.
    pub fn evaluate(&self, scene: usize, input: &RgbdInput, record: &mut MetricsRecord) -> Result<()> {
        let pred = self.predictor.as_ref();
        let canonical = render_prediction(pred, scene, input, &input.camera, false, self.tau(), self.bg())?;
        record.psnr_canonical = Some(psnr(&canonical.color, &input.image)?);
        let pivot = orbit_pivot(input);
        let mut nfs = 0.0;
        for yaw in &self.config.eval_yaws_deg {
            let cam = input.camera.orbit(&pivot, yaw.to_radians(), 0.0);
            let r = render_prediction(pred, scene, input, &cam, self.config.aggregation, self.tau(), self.bg())?;
            record.hole_coverage.insert(yaw.round() as i32, hole_coverage(&r.alpha, self.tau()));
            nfs += nfs_surrogate(&r.depth, 20);
        }
        if !self.config.eval_yaws_deg.is_empty() {
            record.nfs_surrogate = Some(nfs / self.config.eval_yaws_deg.len() as f64);
        }
        Ok(())
    }
}

/// Trained predictor and one metrics record per step.
pub struct TrainOutcome {
    pub predictor: Box<dyn Predictor>,
    pub log: Vec<MetricsRecord>,
}

/// Runs both stages on `corpus` with a freshly built predictor.
pub fn run_training(corpus: &[RgbdInput], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::for_corpus(corpus, cfg.clone())?;
    let mut log = Vec::new();
    run_stages(&mut trainer, corpus, |r| log.push(r.clone()))?;
    Ok(TrainOutcome {
        predictor: trainer.predictor,
        log,
    })
}

/// Runs `config.steps` stage-one steps then `config.refine_steps`
/// refinement steps, handing each record to `sink`.
///
/// Each step picks a scene uniformly and, in stage one, the canonical
/// branch with probability `canonical_prob`. Steps with a non-finite loss
/// are skipped with a warning.
pub fn run_stages(trainer: &mut Trainer, corpus: &[RgbdInput], mut sink: impl FnMut(&MetricsRecord)) -> Result<()> {
    if corpus.is_empty() {
        return Err(invalid("empty corpus"));
    }
    let cfg = trainer.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.steps + cfg.refine_steps;
    for step in 0..total {
        let scene = rng.random_range(0..corpus.len());
        let input = &corpus[scene];
        let stage_two = step >= cfg.steps;
        let (branch, result) = if stage_two {
            let cam1 = sample_novel_camera(input, &cfg.sampler(), &mut rng);
            ("refine", trainer.refine_step(scene, input, &cam1, cfg.refine_lr_scale))
        } else if rng.random::<f64>() < cfg.canonical_prob {
            ("canonical", trainer.train_step_canonical(scene, input))
        } else {
            let name = if cfg.aggregation { "cycle" } else { "baseline" };
            (name, trainer.train_step_cycle(scene, input, &mut rng))
        };
        let losses = match result {
            Ok(r) => r,
            Err(Error::NonFinite(msg)) => {
                log::warn!("step {step}: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut record = MetricsRecord {
            step,
            stage: if stage_two { "stage2" } else { "stage1" }.to_string(),
            branch: branch.to_string(),
            scene,
            losses,
            ..MetricsRecord::default()
        };
        if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == total) {
            trainer.evaluate(0, &corpus[0], &mut record)?;
        }
        sink(&record);
    }
    Ok(())
}
