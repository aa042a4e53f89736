//! `poet`: scene generation, training, localization and evaluation.

mod config;
mod files;
mod scene;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use poet_core::geometry::{compose_refined_pose, CameraIntrinsics, Pose7D};
use poet_core::maprender::{
    generate_synthetic_scene, io, render_depth, sample_camera_poses, sample_perturbation,
    PerturbationRange, SceneSpec, TrajectorySpec,
};
use poet_core::pipeline::{
    evaluate, localize, read_results_csv, stage_range, train, write_results_csv, Frame,
    LocalizationResult, NetworkConfig, NetworkEstimator, OptimizerKind, PoetNetwork,
    RelativePoseEstimator, TrainConfig, MAX_STAGES,
};
use poet_core::rng::{derive_seed, seeded};

use crate::files::{create_dir, parse_span, write_atomic};
use crate::scene::{frame_id, Scene};

#[derive(Parser, Debug)]
#[command(
    name = "poet",
    version,
    about = "Camera localization in point-cloud maps with pose queries"
)]
#[command(args_override_self = true)]
struct Cli {
    /// key = value file whose entries act as flags; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic street scene: map, camera poses and RGB frames.
    GenScene(GenSceneArgs),
    /// Train one refinement stage.
    Train(TrainArgs),
    /// Localize frames from perturbed initial poses.
    Localize(LocalizeArgs),
    /// Aggregate result files into per-iteration metrics.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenSceneArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 192)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Horizontal field of view in degrees.
    #[arg(long, default_value_t = 80.0)]
    fov: f64,
    /// Ground grid spacing in meters.
    #[arg(long, default_value_t = SceneSpec::default().ground_spacing)]
    ground_spacing: f64,
    /// Object surface spacing in meters.
    #[arg(long, default_value_t = SceneSpec::default().surface_spacing)]
    surface_spacing: f64,
    #[arg(long, default_value_t = SceneSpec::default().boxes)]
    boxes: usize,
    #[arg(long, default_value_t = SceneSpec::default().poles)]
    poles: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Arch {
    /// Narrow widths that train on a CPU in minutes.
    Toy,
    /// Full widths.
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Opt {
    Adam,
    Sgd,
}

/// Perturbation range flags; unset values fall back to the stage defaults.
#[derive(Args, Debug)]
struct RangeArgs {
    /// Stage whose default ranges apply (1 coarse .. 3 fine).
    #[arg(long, default_value_t = 1)]
    stage: usize,
    /// Maximum translation per axis, meters.
    #[arg(long)]
    trans_range: Option<f64>,
    /// Maximum rotation per Euler angle, degrees.
    #[arg(long)]
    rot_range: Option<f64>,
}

impl RangeArgs {
    fn range(&self) -> Result<PerturbationRange> {
        let d = stage_range(self.stage)?;
        Ok(PerturbationRange::new(
            self.trans_range.unwrap_or(d.max_translation),
            self.rot_range.unwrap_or(d.max_rotation_deg),
        )?)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    range: RangeArgs,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = Opt::Adam)]
    optimizer: Opt,
    #[arg(long, default_value_t = 0.5)]
    mirror_prob: f64,
    #[arg(long, value_enum, default_value_t = Arch::Toy)]
    arch: Arch,
    /// Frames to train on, e.g. 0..200 (default all).
    #[arg(long, value_parser = parse_span)]
    frames: Option<std::ops::Range<usize>>,
    /// Loss log (CSV); defaults to the checkpoint path plus `.loss.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    scene: PathBuf,
    /// One checkpoint per refinement iteration, coarse first.
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    /// Result CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Seeds the pose queries.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeds the initial perturbations; defaults to --seed.
    #[arg(long)]
    init_seed: Option<u64>,
    /// Pose queries averaged per prediction.
    #[arg(long, default_value_t = 1)]
    nq: usize,
    /// Range of the initial perturbation.
    #[command(flatten)]
    range: RangeArgs,
    #[arg(long, value_parser = parse_span)]
    frames: Option<std::ops::Range<usize>>,
    /// Directory for depth-over-RGB images at the initial and final poses.
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Result CSVs, one per run.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Use exactly this many result files.
    #[arg(long)]
    runs: Option<usize>,
    /// Metrics CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(poet_core::Error::Divergence { .. })));
            ExitCode::from(if diverged { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene(a) => gen_scene(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Localize(a) => cmd_localize(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn gen_scene(a: &GenSceneArgs) -> Result<()> {
    ensure!(a.frames > 0, "--frames must be positive");
    let k = CameraIntrinsics::with_fov(a.width, a.height, a.fov)?;
    let spec = SceneSpec {
        ground_spacing: a.ground_spacing,
        surface_spacing: a.surface_spacing,
        boxes: a.boxes,
        poles: a.poles,
        ..SceneSpec::default()
    };
    create_dir(&a.out)?;
    let mut rng = seeded(a.seed);
    let (map, model) = generate_synthetic_scene(&spec, &mut rng)?;
    let poses = sample_camera_poses(&spec, &TrajectorySpec::default(), a.frames, &mut rng);
    let frames: Vec<Frame> = poses
        .into_iter()
        .map(|pose| Frame {
            image: model.render_rgb(&pose, &k),
            pose,
        })
        .collect();
    let scene = Scene {
        map,
        intrinsics: k,
        ids: (0..a.frames).map(frame_id).collect(),
        frames,
    };
    scene.write(&a.out)?;
    eprintln!(
        "wrote {} points and {} frames to {}",
        scene.map.len(),
        a.frames,
        a.out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<PoetNetwork<f32>> {
    let f = fs::File::open(path)
        .with_context(|| format!("cannot open checkpoint {}", path.display()))?;
    PoetNetwork::load(BufReader::new(f))
        .with_context(|| format!("reading checkpoint {}", path.display()))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let range = a.range.range()?;
    ensure!(a.batch > 0, "--batch must be positive");
    ensure!(
        a.lr >= 0.0 && a.lr.is_finite(),
        "--lr must be a non-negative number"
    );
    ensure!(
        (0.0..=1.0).contains(&a.mirror_prob),
        "--mirror-prob must lie in [0, 1]"
    );
    let (_, data) = Scene::read(&a.scene, a.frames.clone())?.into_dataset();
    let base = match a.arch {
        Arch::Toy => NetworkConfig::toy(),
        Arch::Full => NetworkConfig::default(),
    };
    let config = NetworkConfig {
        height: data.intrinsics.height,
        width: data.intrinsics.width,
        ..base
    };
    let mut net = PoetNetwork::<f32>::new(&config, a.seed)?;
    let cfg = TrainConfig {
        batch: a.batch,
        lr: a.lr,
        optimizer: match a.optimizer {
            Opt::Adam => OptimizerKind::Adam,
            Opt::Sgd => OptimizerKind::Sgd,
        },
        mirror_prob: a.mirror_prob,
        ..TrainConfig::new(range, a.steps, a.seed)
    };
    let mut log = Vec::with_capacity(a.steps);
    let mut window = 0.0;
    train(&mut net, &data, &cfg, |s| {
        log.push(*s);
        window += s.last_layer_loss;
        if (s.step + 1) % 100 == 0 {
            eprintln!(
                "step {:>5}  last-layer loss {:.4}",
                s.step + 1,
                window / 100.0
            );
            window = 0.0;
        }
    })?;
    write_atomic(&a.out, |w| Ok(net.save(w)?))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    write_atomic(&log_path, |w| {
        writeln!(w, "step,loss,last_layer_loss")?;
        for s in &log {
            writeln!(w, "{},{},{}", s.step, s.loss, s.last_layer_loss)?;
        }
        Ok(())
    })?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

/// Initial pose for frame `index`: the ground truth moved by a perturbation
/// drawn from its own seeded stream, as in training.
fn initial_pose(gt: &Pose7D, range: &PerturbationRange, seed: u64, index: usize) -> Pose7D {
    let delta = sample_perturbation(range, &mut seeded(derive_seed(seed, index as u64)));
    compose_refined_pose(gt, &delta.inverse())
}

fn cmd_localize(a: &LocalizeArgs) -> Result<()> {
    ensure!(
        a.ckpts.len() <= MAX_STAGES,
        "at most {MAX_STAGES} checkpoints, got {}",
        a.ckpts.len()
    );
    ensure!(a.nq > 0, "--nq must be positive");
    ensure!(a.jobs > 0, "--jobs must be positive");
    let range = a.range.range()?;
    let nets = a
        .ckpts
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let offset = a.frames.as_ref().map_or(0, |s| s.start);
    let scene = Scene::read(&a.scene, a.frames.clone())?;
    let k = scene.intrinsics;
    for (net, path) in nets.iter().zip(&a.ckpts) {
        let c = &net.config;
        ensure!(
            (c.width, c.height) == (k.width, k.height),
            "checkpoint {} expects {}x{} images, scene frames are {}x{}",
            path.display(),
            c.width,
            c.height,
            k.width,
            k.height
        );
    }
    if let Some(dir) = &a.overlay {
        create_dir(dir)?;
    }
    let init_seed = a.init_seed.unwrap_or(a.seed);
    let run_frame = |j: usize| -> Result<LocalizationResult> {
        let idx = offset + j;
        let f = &scene.frames[j];
        let p0 = initial_pose(&f.pose, &range, init_seed, idx);
        let frame_seed = derive_seed(a.seed, idx as u64);
        let mut ests: Vec<NetworkEstimator> = nets
            .iter()
            .enumerate()
            .map(|(s, n)| NetworkEstimator::new(n, a.nq, derive_seed(frame_seed, s as u64)))
            .collect();
        let mut stages: Vec<&mut dyn RelativePoseEstimator> = ests
            .iter_mut()
            .map(|e| e as &mut dyn RelativePoseEstimator)
            .collect();
        let res = localize(&f.image, &scene.map, &k, &p0, &mut stages, Some(&f.pose))?;
        if ests.iter().any(|e| e.degenerate) {
            eprintln!(
                "warning: frame {} produced a degenerate quaternion",
                scene.ids[j]
            );
        }
        if let Some(dir) = &a.overlay {
            for (tag, pose) in [
                ("initial", &res.poses[0]),
                ("final", res.poses.last().expect("non-empty")),
            ] {
                let depth = render_depth(&scene.map, pose, &k)?;
                let img = io::depth_overlay(&f.image, &depth, 1.0, 40.0)?;
                write_atomic(&dir.join(format!("{}_{tag}.ppm", scene.ids[j])), |w| {
                    Ok(io::write_ppm(&img, w)?)
                })?;
            }
        }
        Ok(res)
    };
    let n = scene.frames.len();
    let jobs = a.jobs.min(n);
    let results: Vec<Result<LocalizationResult>> = if jobs == 1 {
        (0..n).map(run_frame).collect()
    } else {
        let mut slots: Vec<Option<Result<LocalizationResult>>> = (0..n).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs)
                .map(|t| {
                    let run_frame = &run_frame;
                    s.spawn(move || {
                        (t..n)
                            .step_by(jobs)
                            .map(|j| (j, run_frame(j)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (j, r) in h.join().expect("worker panicked") {
                    slots[j] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|r| r.expect("every frame ran"))
            .collect()
    };
    let rows = scene
        .ids
        .iter()
        .cloned()
        .zip(results)
        .map(|(id, r)| r.map(|r| (id, r)))
        .collect::<Result<Vec<_>>>()?;
    write_atomic(&a.out, |w| Ok(write_results_csv(&rows, w)?))?;
    if let Some(last) = median_final(&rows) {
        eprintln!(
            "{} frames, median final error {:.1} cm / {:.2} deg",
            rows.len(),
            last.0,
            last.1
        );
    }
    Ok(())
}

fn median_final(rows: &[(String, LocalizationResult)]) -> Option<(f64, f64)> {
    let mut t: Vec<f64> = Vec::new();
    let mut r: Vec<f64> = Vec::new();
    for (_, res) in rows {
        let e = *res.errors.as_ref()?.last()?;
        t.push(e.0);
        r.push(e.1);
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            (v[m - 1] + v[m]) / 2.0
        }
    };
    (!t.is_empty()).then(|| (med(&mut t), med(&mut r)))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let files = match a.runs {
        Some(n) => {
            ensure!(n > 0, "--runs must be positive");
            ensure!(
                a.results.len() >= n,
                "--runs {n} needs {n} result files, got {}",
                a.results.len()
            );
            &a.results[..n]
        }
        None => &a.results[..],
    };
    let mut runs = Vec::with_capacity(files.len());
    let mut ids: Option<Vec<String>> = None;
    for path in files {
        let f = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
        let rows = read_results_csv(BufReader::new(f))
            .with_context(|| format!("reading {}", path.display()))?;
        let these: Vec<String> = rows.iter().map(|r| r.frame_id.clone()).collect();
        match &ids {
            Some(first) if *first != these => bail!(
                "{} covers different frames than {}",
                path.display(),
                files[0].display()
            ),
            _ => ids = Some(these),
        }
        runs.push(rows.into_iter().map(|r| r.errors).collect::<Vec<_>>());
    }
    let report = evaluate(&runs)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_atomic(out, |w| Ok(w.write_all(report.to_csv().as_bytes())?))?;
    }
    Ok(())
}
