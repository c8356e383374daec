//! Deterministic synthetic scenes used by tests, examples and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::grid::Grid;
use crate::lift::RgbdInput;
use crate::predictor::{DirectFit, Slot};
use crate::train::{orbit_pivot, TrainConfig};

/// Focal length of fixture cameras relative to the image width (about 53°
/// horizontal field of view).
pub const FIXTURE_FOCAL: f64 = 1.0;

fn camera(size: usize) -> Camera {
    Camera::centered(size, size, FIXTURE_FOCAL * size as f64).expect("fixture camera")
}

/// Smooth color field over a gently curved surface around depth 2.
pub fn smooth_scene(size: usize, seed: u64) -> RgbdInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let s = size as f64;
    let image = Grid::from_fn(size, size, |c, r| {
        let (x, y) = (c as f64 / s, r as f64 / s);
        [
            0.5 + 0.35 * (3.0 * x + phase[0]).sin() * (2.0 * y + phase[1]).cos(),
            0.5 + 0.35 * (2.5 * y + phase[2]).sin(),
            0.5 + 0.3 * (2.0 * (x + y) + phase[3]).cos(),
        ]
    });
    let depth = Grid::from_fn(size, size, |c, r| {
        let (x, y) = (c as f64 / s - 0.5, r as f64 / s - 0.5);
        2.0 + 0.15 * (2.0 * x + phase[4]).sin() + 0.1 * (3.0 * y + phase[5]).cos()
    });
    RgbdInput::new(image, depth, camera(size)).expect("fixture scene")
}

/// A fronto-parallel square in front of a textured background plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccluderSpec {
    /// Square center as a fraction of the image size.
    pub center: (f64, f64),
    /// Half side as a fraction of the image size.
    pub half_size: f64,
    pub fg_depth: f64,
    pub bg_depth: f64,
    pub fg_color: [f64; 3],
    /// Phase of the background texture.
    pub phase: f64,
}

impl Default for OccluderSpec {
    fn default() -> Self {
        Self {
            center: (0.5, 0.5),
            half_size: 0.2,
            fg_depth: 1.5,
            bg_depth: 3.0,
            fg_color: [0.85, 0.25, 0.2],
            phase: 0.0,
        }
    }
}

impl OccluderSpec {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            center: (rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)),
            half_size: rng.random_range(0.12..0.25),
            fg_depth: rng.random_range(1.3..1.8),
            bg_depth: rng.random_range(2.6..3.4),
            fg_color: [rng.random_range(0.5..0.95), rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Whether pixel (c, r) of a `size`-wide image lies on the square.
    pub fn covers(&self, size: usize, c: usize, r: usize) -> bool {
        let s = size as f64;
        let (x, y) = ((c as f64 + 0.5) / s, (r as f64 + 0.5) / s);
        (x - self.center.0).abs() <= self.half_size && (y - self.center.1).abs() <= self.half_size
    }

    pub fn render(&self, size: usize) -> RgbdInput {
        let s = size as f64;
        let image = Grid::from_fn(size, size, |c, r| {
            if self.covers(size, c, r) {
                let shade = 0.9 + 0.1 * (r as f64 / s);
                self.fg_color.map(|v| v * shade)
            } else {
                let (x, y) = (c as f64 / s, r as f64 / s);
                [
                    0.45 + 0.25 * (9.0 * x + self.phase).sin(),
                    0.5 + 0.25 * (7.0 * y - self.phase).cos(),
                    0.55 + 0.2 * (6.0 * (x - y)).sin(),
                ]
            }
        });
        let depth = Grid::from_fn(size, size, |c, r| if self.covers(size, c, r) { self.fg_depth } else { self.bg_depth });
        RgbdInput::new(image, depth, camera(size)).expect("fixture scene")
    }
}

/// The default two-plane occluder scene.
pub fn occluder_scene(size: usize) -> RgbdInput {
    OccluderSpec::default().render(size)
}

/// `count` occluder scenes with randomized layout, depths and colors; the
/// first one is the default scene.
pub fn occluder_corpus(size: usize, count: usize, seed: u64) -> Vec<RgbdInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            if i == 0 {
                occluder_scene(size)
            } else {
                OccluderSpec::sample(&mut rng).render(size)
            }
        })
        .collect()
}

/// An occluder scene whose model carries a see-through patch: the opacity
/// logits are lowered on a background square near the optical axis in the
/// canonical table and everywhere in the novel table, so the novel lift
/// contributes no donors and the patch stays visible along the arc. The
/// patch faces the camera, which makes it an artifact candidate in every
/// arc frame.
pub struct ArtifactFixture {
    pub scene: RgbdInput,
    pub predictor: DirectFit,
    pub config: TrainConfig,
    /// End camera of the refinement arc.
    pub cam1: Camera,
}

/// Opacity logit offset of the seeded patches.
pub const ARTIFACT_OPACITY_OFFSET: f64 = -10.0;

pub fn seeded_artifact_fixture(size: usize) -> ArtifactFixture {
    let scene = OccluderSpec {
        center: (0.82, 0.5),
        half_size: 0.1,
        ..OccluderSpec::default()
    }
    .render(size);
    let mut predictor = DirectFit::new(size, size, 1).expect("fixture predictor");
    let stride = crate::lift::AttributeMaps::CHANNELS;
    let patch = |c: usize, r: usize| {
        let (x, y) = ((c as f64 + 0.5) / size as f64, (r as f64 + 0.5) / size as f64);
        (x - 0.45).abs() < 0.15 && (y - 0.5).abs() < 0.15
    };
    let table = predictor.table_mut(0, Slot::Canonical);
    for r in 0..size {
        for c in 0..size {
            if patch(c, r) {
                table[(r * size + c) * stride + 6] = ARTIFACT_OPACITY_OFFSET;
            }
        }
    }
    for px in predictor.table_mut(0, Slot::Novel).chunks_exact_mut(stride) {
        px[6] = ARTIFACT_OPACITY_OFFSET;
    }
    let config = TrainConfig {
        predictor: crate::predictor::PredictorKind::DirectFit,
        steps: 0,
        refine_steps: 200,
        learning_rate: 0.3,
        ..TrainConfig::default()
    };
    let cam1 = scene.camera.orbit(&orbit_pivot(&scene), 10f64.to_radians(), 0.0);
    ArtifactFixture {
        scene,
        predictor,
        config,
        cam1,
    }
}
