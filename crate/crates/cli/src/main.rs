//! `sgsurf`: scene-graph-guided neural surface reconstruction pipeline.
//!
//! Subcommands: `gen` (synthetic dataset), `train` (joint optimization),
//! `eval` (mesh + pose evaluation), `graph` (scene-graph inspection),
//! `render` (render a node's current estimated view).
//!
//! Exit codes: 0 success, 1 input/configuration error, 2 runtime failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sgsurf_core::dataset::{read_bundle, write_bundle, DatasetBundle, OutlierSpec, SceneSpec};
use sgsurf_core::error::Error;
use sgsurf_core::eval::{evaluate, EvalInputs};
use sgsurf_core::img::psnr;
use sgsurf_core::mesh::marching_cubes;
use sgsurf_core::trainer::{latest_checkpoint, EpochReport, TrainConfig, Trainer};
use sgsurf_core::VoxelField;

#[derive(Parser)]
#[command(
    name = "sgsurf",
    about = "Scene-graph-guided neural surface reconstruction",
    version
)]
struct Cli {
    /// Worker pool size (or set SGSURF_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    Gen(GenArgs),
    /// Run the joint optimization.
    Train(TrainArgs),
    /// Extract a mesh from a run and evaluate it against ground truth.
    Eval(EvalArgs),
    /// Inspect a bundle's scene graph, pruning, and confidence scores.
    Graph(GraphArgs),
    /// Render a node's current estimated view from a run.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for the bundle.
    #[arg(long)]
    out: PathBuf,
    /// Scene preset (toy, sphere).
    #[arg(long, default_value = "toy")]
    scene: String,
    /// Number of cameras on the hemisphere.
    #[arg(long, default_value_t = 15)]
    cameras: usize,
    /// Fraction of cameras receiving outlier pose noise, in [0, 1/3].
    #[arg(long, default_value_t = 0.2)]
    outlier_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of matches replaced with random wrong correspondences.
    #[arg(long, default_value_t = 0.0)]
    contaminate: f64,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset bundle directory (from `gen`).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and reports.
    #[arg(long)]
    out: PathBuf,
    /// key=value config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint directory (.../epoch_E).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Disable the IoU loss (beta = 0).
    #[arg(long)]
    no_iou: bool,
    /// Disable coarse-to-fine blurring (sigma = 0 everywhere).
    #[arg(long)]
    no_c2f: bool,
    /// Disable confidence estimation: uniform sampling, no updates.
    #[arg(long)]
    no_confidence: bool,
    /// Disable scene-graph pruning (tau = 180).
    #[arg(long)]
    no_prune: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory (from `train`).
    #[arg(long)]
    run: PathBuf,
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Output JSON report path.
    #[arg(long)]
    out: PathBuf,
    /// Marching-cubes resolution for mesh extraction.
    #[arg(long)]
    mesh_res: Option<usize>,
}

#[derive(Args)]
struct GraphArgs {
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Report pruning at this angular threshold (degrees).
    #[arg(long)]
    tau: Option<f64>,
    /// Print per-node statistics.
    #[arg(long)]
    stats: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Run directory (from `train`).
    #[arg(long)]
    run: PathBuf,
    /// Dataset bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Node id to render.
    #[arg(long)]
    node: usize,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Render every Nth pixel.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's rendered usage text but follow the exit-code
            // contract: parse problems are input errors unless the user
            // asked for help/version.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("SGSURF_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            log::warn!("could not size worker pool: {e}");
        }
    }

    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Graph(args) => cmd_graph(args),
        Command::Render(args) => cmd_render(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

type CmdResult = Result<(), Error>;

fn cmd_gen(args: GenArgs) -> CmdResult {
    if args.out.exists() {
        let non_empty = std::fs::read_dir(&args.out)
            .map(|mut it| it.next().is_some())
            .unwrap_or(false);
        if non_empty && !args.force {
            return Err(Error::input(format!(
                "output directory {} is not empty (use --force to overwrite)",
                args.out.display()
            )));
        }
    }
    let mut scene = SceneSpec::by_name(&args.scene, args.seed)?;
    scene.n_cameras = args.cameras;
    scene.contaminate = args.contaminate;
    scene.width = args.image_size;
    scene.height = args.image_size;
    let outliers = OutlierSpec {
        fraction: args.outlier_frac,
        seed: sgsurf_core::rng::mix(args.seed, 0x0071),
        ..OutlierSpec::default()
    };
    let bundle = DatasetBundle::generate(&scene, &outliers)?;
    write_bundle(&bundle, &args.out)?;
    println!(
        "wrote {} cameras, {} edges, {} labeled outliers to {}",
        bundle.nodes.len(),
        bundle.edges.len(),
        bundle.outlier_labels.len(),
        args.out.display()
    );
    if !bundle.outlier_labels.is_empty() {
        println!("outlier nodes: {:?}", bundle.outlier_labels);
    }
    Ok(())
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_config_string(&text)?
        }
        None => TrainConfig::default(),
    };
    if args.no_iou {
        cfg.beta = 0.0;
    }
    if args.no_c2f {
        cfg.sigma0_factor = 0.0;
    }
    if args.no_confidence {
        cfg.uniform_sampling = true;
    }
    if args.no_prune {
        cfg.tau_deg = 180.0;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let cfg = load_config(&args)?;
    let bundle = read_bundle(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    // Record the effective configuration alongside the run.
    let cfg_path = args.out.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_config_string()).map_err(|e| Error::io(&cfg_path, e))?;

    let trainer = match &args.resume {
        Some(ckpt) => Trainer::resume(&bundle, cfg, ckpt)?,
        None => Trainer::new(&bundle, cfg)?,
    };
    let output = trainer.run(Some(&args.out))?;
    let last = output.reports.last();
    match last {
        Some(r) => println!(
            "finished epoch {}: photo {:.4}, eikonal {:.4}, iou {:.4}",
            r.epoch, r.mean_photo, r.mean_eikonal, r.mean_iou
        ),
        None => println!("no epochs to run"),
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let bundle = read_bundle(&args.data)?;
    let ckpt = latest_checkpoint(&args.run)?;
    let field = VoxelField::load_checkpoint(&ckpt.join("field.bin"))?;

    // Rebuild the trained graph state (poses + confidences) at the last
    // checkpoint, plus its sampled multiset for SG-H.
    let cfg = run_config(&args.run)?;
    let trainer = Trainer::resume(&bundle, cfg.clone(), &ckpt)?;
    let graph = trainer.graph;
    let report_path = ckpt.join("report.json");
    let report_text =
        std::fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let epoch_report: EpochReport = serde_json::from_str(&report_text)
        .map_err(|e| Error::format(&report_path, format!("bad report: {e}")))?;

    let mesh_res = args.mesh_res.unwrap_or(cfg.mesh_resolution);
    let mesh = marching_cubes(&field, mesh_res, 0.0)?;
    if mesh.is_empty() {
        return Err(Error::input("extracted mesh is empty (no zero level set)"));
    }
    let initial_poses = bundle.initial_poses();
    let inputs = EvalInputs::with_defaults(
        &mesh,
        &bundle.gt_mesh,
        &graph,
        &initial_poses,
        &epoch_report.sampled_nodes,
    );
    let report = evaluate(&inputs)?;
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    std::fs::write(&args.out, json).map_err(|e| Error::io(&args.out, e))?;
    print!("{}", report.to_table());
    println!("report written to {}", args.out.display());
    Ok(())
}

fn run_config(run_dir: &std::path::Path) -> Result<TrainConfig, Error> {
    let path = run_dir.join("config.txt");
    match std::fs::read_to_string(&path) {
        Ok(text) => TrainConfig::from_config_string(&text),
        Err(_) => Ok(TrainConfig::default()),
    }
}

fn cmd_graph(args: GraphArgs) -> CmdResult {
    let bundle = read_bundle(&args.data)?;
    let mut graph = bundle.to_scene_graph()?;
    println!(
        "nodes: {}   edges: {}   matches: {}",
        graph.nodes.len(),
        graph.edges.len(),
        graph.edges.iter().map(|e| e.matches.len()).sum::<usize>()
    );
    if let Some(tau) = args.tau {
        let pruned = graph.prune(tau)?;
        println!(
            "tau {tau:.1} deg: {} edges removed, {} remain, {} node(s) isolated",
            graph.edges.len() - pruned.edges.len(),
            pruned.edges.len(),
            pruned.isolated_nodes().len()
        );
        graph = pruned;
    }
    if args.stats {
        let raw = graph.raw_confidence();
        match graph.init_confidence() {
            Ok(()) => {
                println!("{:>5} {:>12} {:>12}", "node", "raw", "confidence");
                for (node, r) in graph.nodes.iter().zip(&raw) {
                    println!("{:>5} {:>12.3} {:>12.6}", node.id, r, node.confidence);
                }
                let total: f64 = graph.confidence_vector().iter().sum();
                println!("confidence column sums to {total:.3}");
            }
            Err(e) => println!("confidence unavailable: {e}"),
        }
    }
    Ok(())
}

fn cmd_render(args: RenderArgs) -> CmdResult {
    let bundle = read_bundle(&args.data)?;
    let ckpt = latest_checkpoint(&args.run)?;
    let field = VoxelField::load_checkpoint(&ckpt.join("field.bin"))?;
    let cfg = run_config(&args.run)?;
    let trainer = Trainer::resume(&bundle, cfg.clone(), &ckpt)?;
    let graph = trainer.graph;
    let Some(node) = graph.nodes.iter().find(|n| n.id == args.node) else {
        return Err(Error::input(format!("unknown node id {}", args.node)));
    };
    if args.stride == 0 {
        return Err(Error::input("stride must be >= 1"));
    }
    let rendered = field.render_image(
        &node.pose,
        &graph.intrinsics,
        args.stride,
        cfg.n_samples,
        cfg.background,
    );
    rendered.save_png(&args.out)?;
    let reference = sgsurf_core::trainer::subsample(&node.image, args.stride);
    let db = psnr(&rendered, &reference)?;
    println!("node {} PSNR {db:.2} dB -> {}", args.node, args.out.display());
    Ok(())
}
