//! Command-line front end. Set CYCLESPLAT_WORKERS to pin the worker count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cyclesplat::aggregate::inference_aggregate;
use cyclesplat::gradcheck::{run_suite, GROUP_NAMES};
use cyclesplat::io::{
    load_config, read_checkpoint, write_checkpoint, write_pfm, write_rgb8_png, MetricsWriter, SceneManifest,
};
use cyclesplat::lift::RgbdInput;
use cyclesplat::metrics::{hole_coverage, MetricsRecord};
use cyclesplat::raster::{normals_from_depth, rasterize};
use cyclesplat::refine::ExternalInpainter;
use cyclesplat::train::{orbit_pivot, render_prediction, run_stages, TrainConfig, Trainer};
use cyclesplat::{Error, Result};

#[derive(Parser)]
#[command(name = "cyclesplat", version, about = "Single-image Gaussian splatting with cycle aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct SceneArgs {
    /// Scene manifest (TOML with one [[scenes]] table per scene).
    #[arg(long)]
    manifest: PathBuf,
    /// Index of the scene in the manifest.
    #[arg(long, default_value_t = 0)]
    scene: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train stage one (and stage two if refine_steps > 0).
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render an orbit of color, depth and normal images.
    RenderOrbit {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, default_value_t = 9)]
        frames: usize,
        /// Largest yaw in radians; frames span [-yaw_max, yaw_max].
        #[arg(long, default_value_t = 0.5)]
        yaw_max: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate the canonical and one novel lift and report hole coverage.
    Aggregate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        scene: SceneArgs,
        /// Yaw in radians.
        #[arg(long)]
        yaw: f64,
        #[arg(long, default_value_t = 0.0)]
        pitch: f64,
    },
    /// Run stage two only, starting from a checkpoint.
    Refine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides refine_steps from the checkpoint config.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// External in-painter; called with the staging directory appended.
        #[arg(long, num_args = 1.., value_delimiter = ' ')]
        inpainter: Option<Vec<String>>,
    },
    /// Evaluate a checkpoint on every scene of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Writes records here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check raster gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
    },
}

fn load_scenes(manifest: &Path) -> Result<Vec<RgbdInput>> {
    let (m, base) = SceneManifest::load(manifest)?;
    if m.scenes.is_empty() {
        return Err(Error::Config(format!("{} lists no scenes", manifest.display())));
    }
    m.load_all(&base)
}

fn pick(scenes: &[RgbdInput], index: usize) -> Result<&RgbdInput> {
    scenes
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("scene {index} out of range ({} scenes)", scenes.len())))
}

fn train_into(trainer: &mut Trainer, corpus: &[RgbdInput], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cyclesplat::io::config_to_string(&trainer.config)?)?;
    let mut writer = MetricsWriter::create(&out.join("metrics.jsonl"))?;
    let mut failure = None;
    run_stages(trainer, corpus, |r| {
        if failure.is_none() {
            failure = writer.write(r).err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    writer.flush()?;
    write_checkpoint(&out.join("model.ckpt"), trainer.predictor.as_ref(), &trainer.config)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Cmd::Fit {
            manifest,
            config,
            out,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let corpus = load_scenes(&manifest)?;
            let mut trainer = Trainer::for_corpus(&corpus, cfg)?;
            train_into(&mut trainer, &corpus, &out)?;
        }
        Cmd::RenderOrbit {
            ckpt,
            scene,
            frames,
            yaw_max,
            out,
        } => {
            if frames == 0 {
                return Err(Error::InvalidArgument("--frames must be at least 1".into()));
            }
            let (pred, cfg) = read_checkpoint(&ckpt)?;
            let scenes = load_scenes(&scene.manifest)?;
            let input = pick(&scenes, scene.scene)?;
            let pivot = orbit_pivot(input);
            std::fs::create_dir_all(&out)?;
            for i in 0..frames {
                let yaw = if frames == 1 {
                    0.0
                } else {
                    -yaw_max + 2.0 * yaw_max * i as f64 / (frames - 1) as f64
                };
                let cam = input.camera.orbit(&pivot, yaw, 0.0);
                let r = render_prediction(
                    pred.as_ref(),
                    scene.scene,
                    input,
                    &cam,
                    cfg.aggregation && yaw != 0.0,
                    cfg.thresholds.tau,
                    cfg.background,
                )?;
                write_rgb8_png(&out.join(format!("color_{i:03}.png")), &r.color)?;
                write_pfm(&out.join(format!("depth_{i:03}.pfm")), &r.depth)?;
                let normals = normals_from_depth(&r.depth, &cam).map(|n| [0.5 + 0.5 * n.x, 0.5 + 0.5 * n.y, 0.5 + 0.5 * n.z]);
                write_rgb8_png(&out.join(format!("normal_{i:03}.png")), &normals)?;
            }
        }
        Cmd::Aggregate {
            ckpt,
            scene,
            yaw,
            pitch,
        } => {
            let scenes = load_scenes(&scene.manifest)?;
            let input = pick(&scenes, scene.scene)?;
            let (pred, cfg) = match ckpt {
                Some(p) => read_checkpoint(&p)?,
                None => (
                    cyclesplat::train::build_predictor(&scenes, &TrainConfig::default())?,
                    TrainConfig::default(),
                ),
            };
            let tau = cfg.thresholds.tau;
            let cam = input.camera.orbit(&orbit_pivot(input), yaw, pitch);
            let res = inference_aggregate(input, scene.scene, pred.as_ref(), &cam, tau)?;
            let before = hole_coverage(&rasterize(&res.gs0, &cam, cfg.background).alpha, tau);
            let after = hole_coverage(&rasterize(&res.aggregated.merged_set, &cam, cfg.background).alpha, tau);
            println!(
                "{}",
                serde_json::json!({
                    "donor_count": res.aggregated.donor_count,
                    "hole_coverage_before": before,
                    "hole_coverage_after": after,
                })
            );
        }
        Cmd::Refine {
            ckpt,
            manifest,
            out,
            steps,
            seed,
            inpainter,
        } => {
            let (pred, mut cfg) = read_checkpoint(&ckpt)?;
            cfg.steps = 0;
            if let Some(s) = steps {
                cfg.refine_steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let corpus = load_scenes(&manifest)?;
            let mut trainer = Trainer::new(pred, cfg)?;
            if let Some(cmd) = inpainter {
                let (program, args) = cmd.split_first().expect("clap requires one value");
                trainer.inpainter = Box::new(ExternalInpainter {
                    program: program.into(),
                    args: args.to_vec(),
                    staging: out.join("inpaint"),
                });
            }
            train_into(&mut trainer, &corpus, &out)?;
        }
        Cmd::Eval { ckpt, manifest, out } => {
            let (pred, cfg) = read_checkpoint(&ckpt)?;
            let corpus = load_scenes(&manifest)?;
            let trainer = Trainer::new(pred, cfg)?;
            let mut lines = Vec::new();
            for (i, input) in corpus.iter().enumerate() {
                let mut record = MetricsRecord {
                    stage: "eval".into(),
                    scene: i,
                    ..MetricsRecord::default()
                };
                trainer.evaluate(i, input, &mut record)?;
                lines.push(record);
            }
            match out {
                Some(p) => {
                    let mut w = MetricsWriter::create(&p)?;
                    for r in &lines {
                        w.write(r)?;
                    }
                    w.flush()?;
                }
                None => {
                    let mut w = MetricsWriter::new(std::io::stdout().lock());
                    for r in &lines {
                        w.write(r)?;
                    }
                }
            }
        }
        Cmd::Gradcheck { seed, scenes } => {
            let report = run_suite(seed, scenes, 50, 64)?;
            for (name, g) in GROUP_NAMES.iter().zip(&report.groups) {
                println!(
                    "{name:>10}: {:>6} checked {:>4} failed  max rel error {:.2e}",
                    g.checked, g.failed, g.max_rel_error
                );
            }
            println!("{}", if report.passed() { "gradcheck passed" } else { "gradcheck FAILED" });
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("CYCLESPLAT_WORKERS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: cannot size the worker pool: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: CYCLESPLAT_WORKERS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
