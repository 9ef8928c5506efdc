use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use panoctx::boxes3d::{average_precision, DEFAULT_IOU_THRESHOLD};
use panoctx::context::EncoderParams;
use panoctx::gradcheck;
use panoctx::io;
use panoctx::layout_mesh::{icosphere, layout_iou, DEFAULT_VOXEL_RES};
use panoctx::pointcloud::{depth_to_pointcloud, fibonacci_sample, DEFAULT_FIB_SAMPLES};
use panoctx::scenegen::{generate_scene, render_depth, SceneFile, SceneSpec, SyntheticScene};
use panoctx::toytrain::{self, Toggles, TrainConfig};
use panoctx::Error;

#[derive(Parser)]
#[command(name = "panoctx", version, about = "Panoramic scene toolkit: synthesis, metrics, losses and toy training")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file (directory for `gen`); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads for independent scenes.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes: JSON, layout OBJ and depth EDEP per scene.
    Gen {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long)]
        l_shape_prob: Option<f64>,
        /// Plant one box crossing a wall.
        #[arg(long)]
        plant_violation: bool,
    },
    /// Ray-cast the depth panorama of a scene file to EDEP.
    RenderDepth {
        scene: PathBuf,
        #[arg(long, default_value_t = 512)]
        width: usize,
    },
    /// Lift every depth pixel to a 3D point.
    Depth2pc { depth: PathBuf },
    /// Fibonacci-lattice point samples of a depth panorama.
    FibSample {
        depth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FIB_SAMPLES)]
        n: usize,
    },
    /// Mean average precision of detections against ground truth.
    EvalBoxes {
        #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
        iou: f64,
        dets: PathBuf,
        gts: PathBuf,
    },
    /// 2D and 3D voxel IoU of two layout meshes.
    EvalLayout {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOXEL_RES)]
        res: usize,
    },
    /// Per-term loss report of the model on a scene.
    Loss {
        scene: PathBuf,
        /// PCTX checkpoint; freshly initialized parameters otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of all analytic gradients.
    GradCheck {
        #[arg(long)]
        toy: bool,
    },
    /// Joint gradient descent; writes the loss history as CSV.
    Train {
        /// Scene files; with none, `--generate` scenes are synthesized.
        scenes: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        generate: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        mask_fraction: Option<f64>,
        /// Write trained parameters here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every toggle combination and report held-out metrics as CSV.
    Ablate {
        #[arg(long, default_value_t = 2)]
        train: usize,
        #[arg(long, default_value_t = 2)]
        test: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long)]
        lr: Option<f64>,
        /// Write held-out predictions and ground truth here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Icosphere mesh as OBJ.
    Icosphere {
        #[arg(long)]
        level: u32,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(Error::Json(e))
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 3,
                _ => 2,
            })
        }
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Res<()> {
    match out {
        Some(p) => fs::write(p, bytes)?,
        None => {
            let mut s = std::io::stdout().lock();
            s.write_all(bytes)?;
            s.flush()?;
        }
    }
    Ok(())
}

fn emit_json(out: Option<&Path>, v: &impl serde::Serialize) -> Res<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    emit(out, s.as_bytes())
}

fn read_text(p: &Path) -> Res<String> {
    fs::read_to_string(p).map_err(|e| Failure::Lib(Error::Format(format!("{}: {e}", p.display()))))
}

fn load_scene(path: &Path) -> Res<SyntheticScene> {
    let file: SceneFile = serde_json::from_str(&read_text(path)?)?;
    let obj = path.parent().unwrap_or(Path::new(".")).join(&file.layout_obj);
    let layout = io::read_obj(&obj)?;
    Ok(file.to_scene(layout)?)
}

/// Write `stem.json`, `stem.obj` and `stem.edep` into `dir`.
fn write_scene(dir: &Path, stem: &str, scene: &SyntheticScene, width: usize) -> Res<PathBuf> {
    let obj = format!("{stem}.obj");
    io::write_obj(&dir.join(&obj), &scene.layout)?;
    io::write_edep(&dir.join(format!("{stem}.edep")), &render_depth(scene, width)?)?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(&SceneFile::new(scene, &obj))?)?;
    Ok(json)
}

fn progress(g: &Global, msg: &str) {
    if !g.quiet {
        eprintln!("{msg}");
    }
}

fn train_config(g: &Global, steps: usize, lr: Option<f64>) -> TrainConfig {
    let mut cfg = TrainConfig {
        steps,
        seed: g.seed,
        ..Default::default()
    };
    if let Some(lr) = lr {
        cfg.learning_rate = lr;
    }
    cfg
}

fn synth(seed: u64, n: usize) -> Res<Vec<SyntheticScene>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_scene(seed.wrapping_add(i), &SceneSpec::default()).map_err(Failure::from))
        .collect()
}

fn run(cli: Cli) -> Res<()> {
    let g = cli.global;
    if let Some(j) = g.jobs {
        if j == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let out = g.out.as_deref();
    match cli.command {
        Command::Gen {
            count,
            width,
            l_shape_prob,
            plant_violation,
        } => {
            let dir = out.ok_or_else(|| Failure::Usage("gen needs --out DIR".into()))?;
            fs::create_dir_all(dir)?;
            let mut spec = SceneSpec {
                plant_violation,
                ..Default::default()
            };
            if let Some(p) = l_shape_prob {
                spec.l_shape_prob = p;
            }
            let files: Vec<String> = (0..count as u64)
                .into_par_iter()
                .map(|i| {
                    let seed = g.seed.wrapping_add(i);
                    let scene = generate_scene(seed, &spec)?;
                    let p = write_scene(dir, &format!("scene_{seed:06}"), &scene, width)?;
                    Ok(p.display().to_string())
                })
                .collect::<Res<_>>()?;
            progress(&g, &format!("wrote {count} scenes to {}", dir.display()));
            emit_json(None, &files)
        }
        Command::RenderDepth { scene, width } => {
            let depth = render_depth(&load_scene(&scene)?, width)?;
            emit(out, &io::encode_edep(&depth)?)
        }
        Command::Depth2pc { depth } => {
            let cloud = depth_to_pointcloud(&io::read_edep(&depth)?)?;
            emit(out, io::points_to_text(&cloud).as_bytes())
        }
        Command::FibSample { depth, n } => {
            let cloud = fibonacci_sample(&io::read_edep(&depth)?, n)?;
            emit(out, io::points_to_text(&cloud).as_bytes())
        }
        Command::EvalBoxes { iou, dets, gts } => {
            let d = io::boxes_from_json(&read_text(&dets)?)?;
            let t = io::boxes_from_json(&read_text(&gts)?)?;
            emit_json(out, &average_precision(&d, &t, iou)?)
        }
        Command::EvalLayout { pred, gt, res } => {
            let (a, b) = layout_iou(&io::read_obj(&pred)?, &io::read_obj(&gt)?, res)?;
            emit_json(out, &json!({ "iou2d": a, "iou3d": b, "res": res }))
        }
        Command::Loss { scene, checkpoint } => {
            let base = TrainConfig::default();
            let (model, params) = match checkpoint {
                Some(p) => io::read_checkpoint(&p)?,
                None => {
                    let p = EncoderParams::init(&base.model, g.seed)?;
                    (base.model.clone(), p)
                }
            };
            let data = toytrain::prepare_scene(&load_scene(&scene)?, &model, base.depth_width, base.fib_samples)?;
            emit_json(out, &toytrain::scene_report(&params, &model, &data, &base.weights, &base.exempt)?)
        }
        Command::GradCheck { toy } => {
            if !toy {
                return Err(Failure::Usage("only the toy configuration is supported; pass --toy".into()));
            }
            let report = gradcheck::run_toy(g.seed)?;
            emit_json(out, &report)?;
            if !report.passed {
                let w = report.worst().map(|b| b.name.clone()).unwrap_or_default();
                return Err(Failure::Lib(Error::Numerical(format!(
                    "max relative error {:.3e} in {w}",
                    report.max_rel_err
                ))));
            }
            Ok(())
        }
        Command::Train {
            scenes,
            generate,
            steps,
            lr,
            mask_fraction,
            checkpoint,
        } => {
            let mut cfg = train_config(&g, steps, lr);
            if let Some(m) = mask_fraction {
                cfg.model.mask_fraction = m;
            }
            let list = if scenes.is_empty() {
                synth(g.seed, generate)?
            } else {
                scenes.iter().map(|p| load_scene(p)).collect::<Res<_>>()?
            };
            progress(&g, &format!("training on {} scenes for {steps} steps", list.len()));
            let r = toytrain::train(&list, &cfg)?;
            if let (Some(first), Some(last)) = (r.history.first(), r.history.last()) {
                progress(&g, &format!("total loss {:.6} -> {:.6}", first.total, last.total));
            }
            if let Some(p) = checkpoint {
                io::write_checkpoint(&p, &cfg.model, &r.params)?;
            }
            emit(out, r.history_csv().as_bytes())
        }
        Command::Ablate {
            train,
            test,
            steps,
            lr,
            predictions,
        } => {
            let cfg = train_config(&g, steps, lr);
            let train_set = synth(g.seed, train)?;
            let test_set = synth(g.seed.wrapping_add(1_000_000), test)?;
            progress(&g, &format!("ablating 8 combinations, {steps} steps each"));
            let rows = toytrain::ablate(&train_set, &test_set, &cfg, &Toggles::all())?;
            if let Some(dir) = predictions {
                fs::create_dir_all(&dir)?;
                let gts: Vec<_> = test_set.iter().map(|s| s.boxes.clone()).collect();
                fs::write(dir.join("gts.json"), io::scenes_to_json(&gts)?)?;
                for (i, s) in test_set.iter().enumerate() {
                    io::write_obj(&dir.join(format!("gt_{i}.obj")), &s.layout)?;
                }
                for r in &rows {
                    let t = r.toggles;
                    let tag = format!("c{}p{}m{}", t.context_module as u8, t.physical_loss as u8, t.token_masking as u8);
                    let dets: Vec<_> = r.predictions.iter().map(|p| p.boxes.clone()).collect();
                    fs::write(dir.join(format!("dets_{tag}.json")), io::scenes_to_json(&dets)?)?;
                    for (i, p) in r.predictions.iter().enumerate() {
                        io::write_obj(&dir.join(format!("layout_{tag}_{i}.obj")), &p.layout)?;
                    }
                }
            }
            emit(out, toytrain::ablation_csv(&rows).as_bytes())
        }
        Command::Icosphere { level } => emit(out, io::mesh_to_obj(&icosphere(level)?).as_bytes()),
    }
}
