use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use repaint3d::eval::{self, EvalSource};
use repaint3d::fusion::{ConsistencyKind, SurfaceColorField};
use repaint3d::geometry::{load_mesh, normalize_with_frame, MeshFormat, SceneFrame, Vec3};
use repaint3d::pipeline::{self, exit_code, plan_views, ConfirmMode, Manifest, PipelineConfig};
use repaint3d::protocol::{Painter, PainterKind};
use repaint3d::remesh::{export_colored, remesh_planar, transfer_colors_mapped};
use repaint3d::{Error, Result};

#[derive(Parser)]
#[command(
    name = "repaint3d",
    version,
    about = "Text-guided repainting of 3D geometry"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Paint a mesh or point cloud end to end.
    Run(RunArgs),
    /// Print the view plan as JSON.
    Plan(ConfigArgs),
    /// Evaluation metrics and renders.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Re-export the colored mesh of a finished run.
    Export(ExportArgs),
    /// Serve one paint request directory (usable as an external painter).
    Paint(PaintArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    views: Option<usize>,
    /// Degrees between neighbouring views; defaults to 360 / views.
    #[arg(long)]
    increment: Option<f64>,
    #[arg(long)]
    facade: Option<usize>,
    #[arg(long)]
    elevation: Option<f64>,
    #[arg(long)]
    fov: Option<f64>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Allow a plan that does not close the circle.
    #[arg(long)]
    partial_circle: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    input: PathBuf,
    /// Object name used in prompts.
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    modifier: Option<String>,
    /// procedural | masked-diffusion | external:"cmd {dir}"
    #[arg(long)]
    painter: Option<PainterKind>,
    /// builtin | external:"cmd {dir}"
    #[arg(long)]
    consistency: Option<ConsistencyKind>,
    #[arg(long)]
    no_zoning: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// auto | interactive | seed-retry:K
    #[arg(long)]
    confirm: Option<ConfirmMode>,
    /// Remesh edge length in normalized units; 0 skips remeshing.
    #[arg(long)]
    target_edge: Option<f64>,
    /// Painter timeout in seconds.
    #[arg(long)]
    timeout: Option<u64>,
    #[arg(long)]
    no_eval_views: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Fréchet distance between two feature files.
    Fid {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Kernel distance between two feature files.
    Kid {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 100)]
        subsets: usize,
        #[arg(long, default_value_t = 1000)]
        subset_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bradley-Terry scores from a winner,loser CSV.
    Bt {
        #[arg(long)]
        votes: PathBuf,
    },
    /// Render the eight evaluation views of a colored mesh or a run.
    Views {
        /// Colored mesh (PLY or OBJ).
        #[arg(long, conflicts_with = "run")]
        mesh: Option<PathBuf>,
        /// Run directory; renders its fused color field.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        #[arg(long, default_value_t = 60.0)]
        fov: f64,
    },
}

#[derive(Args)]
struct ExportArgs {
    /// Run directory holding manifest.json and field.ply.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    target_edge: Option<f64>,
    /// Output mesh; .ply or .obj.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PaintArgs {
    #[arg(long)]
    dir: PathBuf,
    /// procedural | masked-diffusion
    #[arg(long, default_value = "procedural")]
    painter: PainterKind,
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(v) = args.views {
        cfg.n_views = v;
        if args.increment.is_none() {
            cfg.increment_deg = 360.0 / v as f64;
        }
    }
    if let Some(v) = args.increment {
        cfg.increment_deg = v;
    }
    if let Some(v) = args.facade {
        cfg.n_facade = v;
    }
    if let Some(v) = args.elevation {
        cfg.elevation = v;
    }
    if let Some(v) = args.fov {
        cfg.fov_y = v;
    }
    if let Some(v) = args.resolution {
        cfg.resolution = v;
    }
    if args.partial_circle {
        cfg.full_circle = false;
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    cfg.object = args.prompt;
    cfg.modifier = args.modifier.or(cfg.modifier);
    if let Some(p) = args.painter {
        cfg.painter = p;
    }
    if let Some(c) = args.consistency {
        cfg.consistency = c;
    }
    if args.no_zoning {
        cfg.zoning = false;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(c) = args.confirm {
        cfg.confirm = c;
    }
    if let Some(t) = args.target_edge {
        cfg.target_edge = t;
    }
    if let Some(t) = args.timeout {
        cfg.painter_timeout_secs = t;
    }
    if args.no_eval_views {
        cfg.eval_views = false;
    }
    let out = pipeline::run_pipeline(&cfg, &args.input, &args.out)?;
    print_json(&serde_json::json!({
        "out": args.out,
        "views": out.views.len(),
        "coverage": out.manifest.coverage,
        "digest": out.manifest.digest,
    }));
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    // a closed pipe (e.g. `| head`) is not an error
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn eval_cmd(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Fid { a, b } => {
            let (fa, fb) = (eval::read_features(&a)?, eval::read_features(&b)?);
            if fa.extractor_id != fb.extractor_id {
                log::warn!(
                    "feature extractors differ: '{}' vs '{}'",
                    fa.extractor_id,
                    fb.extractor_id
                );
            }
            print_json(
                &serde_json::json!({ "fid": eval::fid(&fa, &fb)?, "n_a": fa.n, "n_b": fb.n, "d": fa.d }),
            );
        }
        EvalCommand::Kid {
            a,
            b,
            subsets,
            subset_size,
            seed,
        } => {
            let r = eval::kid(
                &eval::read_features(&a)?,
                &eval::read_features(&b)?,
                subsets,
                subset_size,
                seed,
            )?;
            print_json(&r);
        }
        EvalCommand::Bt { votes } => print_json(&eval::bradley_terry(&eval::read_votes(&votes)?)?),
        EvalCommand::Views {
            mesh,
            run,
            out,
            resolution,
            fov,
        } => {
            let written = match (mesh, run) {
                (Some(m), None) => {
                    let mesh = load_mesh(&m, MeshFormat::from_path(&m)?)?;
                    let (scene, _) = normalize_with_frame(&mesh, &SceneFrame::default())?;
                    eval::render_eval_views(
                        &EvalSource::ColoredMesh(&scene),
                        &out,
                        pipeline::DEFAULT_RADIUS,
                        fov,
                        resolution,
                    )?
                }
                (None, Some(r)) => {
                    let (manifest, scene, _, field) = load_run(&r)?;
                    let source = EvalSource::Field {
                        field: &field,
                        mesh: &scene,
                        k: manifest.config.fusion.k,
                    };
                    eval::render_eval_views(&source, &out, manifest.config.radius, fov, resolution)?
                }
                _ => return Err(Error::Config("pass exactly one of --mesh or --run".into())),
            };
            for (p, _) in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

type LoadedRun = (
    Manifest,
    repaint3d::Mesh,
    (repaint3d::Mesh, SceneFrame),
    SurfaceColorField,
);

/// Manifest, normalized scene, original mesh with its frame, and field.
fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = Manifest::read(&dir.join(pipeline::MANIFEST_FILE))?;
    let cfg = &manifest.config;
    let (original, _) = pipeline::load_input(Path::new(&manifest.input), cfg.pointcloud_grid)?;
    let frame = SceneFrame::new(Vec3::from(cfg.up), Vec3::from(cfg.front))?;
    let (scene, frame) = normalize_with_frame(&original, &frame)?;
    let field = SurfaceColorField::load_ply(&dir.join("field.ply"))?;
    Ok((manifest, scene, (original, frame), field))
}

fn export(args: ExportArgs) -> Result<()> {
    let (manifest, _, (original, frame), field) = load_run(&args.run)?;
    let target = args.target_edge.unwrap_or(manifest.config.target_edge);
    let mesh = if target > 0.0 {
        remesh_planar(&original, target / frame.scale)?
    } else {
        original
    };
    let colored =
        transfer_colors_mapped(&mesh, &field, manifest.config.fusion.k, |p| frame.apply(p))?;
    let out = args
        .out
        .unwrap_or_else(|| pipeline::colored_mesh_path(&args.run));
    export_colored(&colored, &out, MeshFormat::from_path(&out)?)?;
    info!(
        "wrote {} vertices, {} faces",
        colored.vertices.len(),
        colored.faces.len()
    );
    println!("{}", out.display());
    Ok(())
}

fn paint(args: PaintArgs) -> Result<()> {
    if matches!(args.painter, PainterKind::External(_)) {
        return Err(Error::Config(
            "the paint command serves built-in painters only".into(),
        ));
    }
    Painter::new(args.painter).serve(&args.dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Plan(a) => load_config(&a)
            .and_then(|cfg| plan_views(&cfg))
            .map(|p| print_json(&p)),
        Command::Eval(c) => eval_cmd(c),
        Command::Export(a) => export(a),
        Command::Paint(a) => paint(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
