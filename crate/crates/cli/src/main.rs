//! `splatsim`: build, simulate, train, validate, bench, serve, gen-scene.
//!
//! Exit codes: 0 success, 1 invariant failure or runtime error, 2 bad
//! configuration or input. Log verbosity follows `RUST_LOG`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use splatsim::bench::{run_bench, stats_table};
use splatsim::constraints::static_residual;
use splatsim::deformation::PolarSvdGradient;
use splatsim::engine::{bootstrap, rollout, ForceEvent, Trajectory};
use splatsim::hierarchy::{build_hierarchy, prediction_count, Hierarchy};
use splatsim::io::{
    load_trajectory, save_model, save_scene, save_trajectory, EngineConfig, ProviderConfig,
};
use splatsim::projection::CameraAxis;
use splatsim::providers::{train, ModelConfig, OscillatorParams, OscillatorProvider, PredictorModel};
use splatsim::splat::SceneTemplate;
use splatsim::synth::SceneShape;
use splatsim::validate::{run_validation, ValidateOptions};
use splatsim::{Error, Vec3};
use splatsim_service::ServeOptions;

#[derive(Debug, Parser)]
#[command(name = "splatsim", version, about = "Hierarchical Gaussian-kernel simulation")]
struct Cli {
    /// Engine configuration (TOML); defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Config override `key=value`, e.g. `training.epochs=5`. Repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random source (scene, model init, training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the CMS hierarchy and print its statistics.
    Build {
        /// Write the hierarchy as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Roll out the configured provider and write a trajectory.
    Simulate(SimulateArgs),
    /// Train the learned provider on oscillator ground truth or given trajectories.
    Train(TrainArgs),
    /// Run the invariant suite.
    Validate {
        /// Gradient fixture (JSON `{quat_u, quat_v, lambda}`) applied to every CMS.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Random gradients for the determinant sweep.
        #[arg(long, default_value_t = 10_000)]
        det_samples: usize,
    },
    /// Prediction counts and step timing, hierarchical vs flat.
    Bench(BenchArgs),
    /// Serve the simulation over websockets.
    Serve(ServeArgs),
    /// Generate a synthetic scene file (`.json` for JSON, binary otherwise).
    GenScene {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        shape: Option<SceneShape>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        spacing: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// JSON list of `{kernel_ids, force, step}` events.
    #[arg(long)]
    forces: Option<PathBuf>,
    /// Space-time slice CSV (`frame,time,kernel,x,y,z`) of kernels along the
    /// scene's long axis.
    #[arg(long)]
    slice_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Checkpoint path.
    #[arg(short, long)]
    output: PathBuf,
    /// Loss curve CSV; defaults to `<output>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Training trajectories. Without any, one oscillator rollout is generated.
    #[arg(long = "trajectory")]
    trajectories: Vec<PathBuf>,
    /// Frames of the generated ground truth.
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Generate one oscillator rollout per amplitude instead of a single one
    /// at the configured amplitude.
    #[arg(long, value_delimiter = ',')]
    amplitudes: Vec<f64>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Only print the statistics table for these level counts, e.g. `23422,1203,11`.
    #[arg(long, value_delimiter = ',')]
    level_counts: Option<Vec<usize>>,
    /// Timed steps per path.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Neighborhood radius of the flat (one gradient per kernel) path;
    /// defaults to the finest clustering radius.
    #[arg(long)]
    flat_radius: Option<f64>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = 30.0)]
    max_fps: f64,
    #[arg(long, default_value = "z")]
    camera_axis: CameraAxis,
    /// Viewer bundle served at `/`.
    #[arg(long)]
    assets: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    #[arg(long)]
    paused: bool,
    /// Step as fast as possible instead of at `dt` of wall time.
    #[arg(long)]
    unpaced: bool,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::MalformedRecord { .. }
            | Error::NonSpd { .. }
            | Error::InvalidKernel { .. }
            | Error::NotSpd => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<EngineConfig, Failure> {
    let base = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

fn scene_and_hierarchy(cfg: &EngineConfig) -> Result<(SceneTemplate, Hierarchy), Failure> {
    let scene = cfg.scene()?;
    let h = build_hierarchy(&scene, &cfg.radii)?;
    log::info!("hierarchy level counts {:?}", h.level_counts());
    Ok((scene, h))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| fail(1, format!("writing {}: {e}", path.display())))
}

fn cmd_build(cfg: &EngineConfig, output: Option<&Path>) -> Outcome {
    let (_, h) = scene_and_hierarchy(cfg)?;
    println!("{}", stats_table(&h.level_counts())?);
    println!("radii            {:?}", h.radii);
    println!("root kernel      {}", h.root_kernel_id);
    if let Some(p) = output {
        write_file(p, &serde_json::to_string(&h).map_err(Error::from)?)?;
    }
    Ok(())
}

/// Kernels closest to the line through the bounds center along the longest
/// bounds axis, up to 32, ordered along that axis.
fn slice_kernels(scene: &SceneTemplate) -> Vec<usize> {
    let (lo, hi) = scene.bounds();
    let ext = hi - lo;
    let axis = ext.imax();
    let center = (lo + hi) / 2.0;
    let off_axis = |p: &Vec3| {
        let mut d = p - center;
        d[axis] = 0.0;
        d.norm()
    };
    let mut ids: Vec<usize> = (0..scene.len()).collect();
    ids.sort_by(|&a, &b| off_axis(&scene.kernels[a].position).total_cmp(&off_axis(&scene.kernels[b].position)));
    ids.truncate(32);
    ids.sort_by(|&a, &b| scene.kernels[a].position[axis].total_cmp(&scene.kernels[b].position[axis]));
    ids
}

fn cmd_simulate(cfg: &EngineConfig, args: &SimulateArgs) -> Outcome {
    let (scene, h) = scene_and_hierarchy(cfg)?;
    let provider = cfg.provider.build()?;
    let forces: Vec<ForceEvent> = match &args.forces {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(Error::from)?).map_err(Error::from)?,
        None => Vec::new(),
    };
    let state = bootstrap(&scene, &h, cfg.dt, None)?;
    let start = Instant::now();
    let (traj, _) = rollout(&state, &h, &scene, provider.as_ref(), args.steps, &forces)?;
    log::info!("{} steps in {:.2?}", args.steps, start.elapsed());
    save_trajectory(&args.output, &traj)?;
    if let Some(p) = &args.slice_csv {
        let ids = slice_kernels(&scene);
        let mut csv = String::from("frame,time,kernel,x,y,z\n");
        for f in &traj.frames {
            for &k in &ids {
                let x = f.positions[k];
                let _ = writeln!(csv, "{},{},{k},{},{},{}", f.index, f.time, x.x, x.y, x.z);
            }
        }
        write_file(p, &csv)?;
    }
    println!("wrote {} frames of {} kernels to {}", traj.frames.len(), traj.kernel_count(), args.output.display());
    Ok(())
}

fn cmd_train(cfg: &EngineConfig, args: &TrainArgs) -> Outcome {
    let (scene, h) = scene_and_hierarchy(cfg)?;
    let trajectories: Vec<Trajectory> = if args.trajectories.is_empty() {
        let params = match &cfg.provider {
            ProviderConfig::Oscillator(p) => *p,
            _ => OscillatorParams::default(),
        };
        let amplitudes = if args.amplitudes.is_empty() { vec![params.amplitude] } else { args.amplitudes.clone() };
        let state = bootstrap(&scene, &h, cfg.dt, None)?;
        let steps = args.frames.saturating_sub(1).max(1);
        amplitudes
            .iter()
            .map(|&amplitude| {
                let osc = OscillatorProvider::new(OscillatorParams { amplitude, ..params })?;
                Ok(rollout(&state, &h, &scene, &osc, steps, &[])?.0)
            })
            .collect::<Result<_, Error>>()?
    } else {
        args.trajectories.iter().map(|p| load_trajectory(p)).collect::<Result<_, _>>()?
    };
    let model_cfg = ModelConfig {
        num_levels: h.num_levels(),
        attribute_dim: scene.attribute_dim(),
        edges: cfg.edges.clone(),
        ..cfg.model.clone()
    };
    let mut model = PredictorModel::new(model_cfg)?;
    let start = Instant::now();
    let curve = train(&mut model, &trajectories, &h, &cfg.training)?;
    log::info!("trained in {:.2?}", start.elapsed());
    save_model(&args.output, &model)?;
    let mut csv = String::from("epoch,rollout,learning_rate,loss,static_loss,static_samples,momentum_loss\n");
    for s in &curve {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            s.epoch, s.rollout, s.learning_rate, s.loss, s.static_loss, s.static_samples, s.momentum_loss
        );
    }
    let loss_path = args.loss_csv.clone().unwrap_or_else(|| {
        let mut p = args.output.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    write_file(&loss_path, &csv)?;
    let provider = splatsim::providers::LearnedProvider::new(model);
    println!(
        "checkpoint {} ({} epochs, final loss {:.4e}, static residual {:.3e})",
        args.output.display(),
        curve.len(),
        curve.last().map_or(f64::NAN, |s| s.loss),
        static_residual(&h, &provider, cfg.dt)?
    );
    println!("loss curve {}", loss_path.display());
    Ok(())
}

fn cmd_validate(cfg: &EngineConfig, fixture: Option<&Path>, det_samples: usize) -> Outcome {
    let (scene, h) = scene_and_hierarchy(cfg)?;
    let fixture: Option<PolarSvdGradient> = match fixture {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p).map_err(Error::from)?).map_err(Error::from)?),
        None => None,
    };
    let opts = ValidateOptions {
        seed: cfg.seed,
        det_samples,
        fixture,
        ..ValidateOptions::default()
    };
    let report = run_validation(&scene, &h, &opts)?;
    print!("{report}");
    if report.all_passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|g| g.name.as_str()).collect();
        Err(fail(1, format!("invariant failures: {}", names.join(", "))))
    }
}

fn cmd_bench(cfg: &EngineConfig, args: &BenchArgs) -> Outcome {
    if let Some(counts) = &args.level_counts {
        println!("{}", stats_table(counts)?);
        return Ok(());
    }
    let scene = cfg.scene()?;
    let flat_radius = args.flat_radius.unwrap_or(cfg.radii[0]);
    let model = ModelConfig {
        edges: cfg.edges.clone(),
        ..cfg.model.clone()
    };
    let report = run_bench(&scene, &cfg.radii, flat_radius, &model, cfg.dt, args.steps.max(1))?;
    println!("{report}");
    Ok(())
}

fn cmd_serve(cfg: &EngineConfig, args: &ServeArgs) -> Outcome {
    let scene = cfg.scene()?;
    let engine = splatsim::engine::Engine::new(scene, &cfg.radii, cfg.dt, cfg.provider.build()?)?;
    let stats = prediction_count(&engine.hierarchy)?;
    log::info!("{} kernels, {} predictions per step", stats.n_kernels, stats.predictions);
    let opts = ServeOptions {
        bind: args.bind,
        port: args.port,
        max_fps: args.max_fps,
        camera_axis: args.camera_axis,
        realtime: !args.unpaced,
        start_paused: args.paused,
        assets: args.assets.clone(),
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| fail(1, e.to_string()))?;
    rt.block_on(async move {
        let mut server = splatsim_service::start(engine, opts).await.map_err(|e| fail(2, e.to_string()))?;
        println!("serving on ws://{}/ws", server.addr);
        tokio::select! {
            r = server.wait() => r.map_err(|e| fail(1, e.to_string()))?,
            _ = tokio::signal::ctrl_c() => {
                server.shutdown().await.map_err(|e| fail(1, e.to_string()))?;
            }
        }
        Ok(())
    })
}

fn cmd_gen_scene(cfg: &EngineConfig, output: &Path, shape: Option<SceneShape>, count: Option<usize>, spacing: Option<f64>) -> Outcome {
    let mut cfg = cfg.clone();
    cfg.scene = None;
    if let Some(s) = shape {
        cfg.synthetic.shape = s;
    }
    if let Some(n) = count {
        cfg.synthetic.count = n;
    }
    if let Some(s) = spacing {
        cfg.synthetic.spacing = s;
    }
    let scene = cfg.scene()?;
    save_scene(output, &scene)?;
    println!("wrote {} kernels to {}", scene.len(), output.display());
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Build { output } => cmd_build(&cfg, output.as_deref()),
        Command::Simulate(a) => cmd_simulate(&cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Validate { fixture, det_samples } => cmd_validate(&cfg, fixture.as_deref(), *det_samples),
        Command::Bench(a) => cmd_bench(&cfg, a),
        Command::Serve(a) => cmd_serve(&cfg, a),
        Command::GenScene {
            output,
            shape,
            count,
            spacing,
        } => cmd_gen_scene(&cfg, output, *shape, *count, *spacing),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
