//! End-to-end repainting: view planning, the paint loop with periodic
//! fusion, final fusion, evaluation renders, colored export and the run
//! manifest.

mod confirm;
mod manifest;
mod plan;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::info;
use serde::{Deserialize, Serialize};

pub use confirm::{confirm_initialization, ConfirmMode, Decision};
pub use manifest::{digest_artifacts, Manifest, RunStatus, SeedRecord, ViewTiming, MANIFEST_FILE};
pub use plan::{build_prompt, nearest_per_side, plan_views, wrap_deg, PlannedView, ViewPlan};

use crate::error::{Error, Result};
use crate::eval::{render_eval_views, EvalSource};
use crate::fusion::{
    export_nerf_dataset, fuse_views, import_nerf_renders, refresh_views, render_fused,
    report_coverage, sample_surface, ConsistencyKind, FusionParams, SurfaceColorField,
    DEFAULT_DENSITY,
};
use crate::geometry::io::{is_point_cloud, load_points};
use crate::geometry::{
    load_mesh, normalize_with_frame, pointcloud_to_mesh, Camera, Mesh, MeshFormat, SceneFrame,
    Vec3, DEFAULT_GRID,
};
use crate::grid::{depth_range, save_rgb_png, Grid, Image};
use crate::protocol::{write_request, CameraMeta, PaintRequest, Painter, PainterKind, RequestMeta};
use crate::raster::{render_maps, Culling};
use crate::remap::{
    remap_multi, PaintedView, RemapParams, ViewStatus, DEFAULT_TOLERANCE, DEFAULT_ZONE_THRESHOLD,
};
use crate::remesh::{export_colored, remesh_planar, transfer_colors_mapped, DEFAULT_TARGET_EDGE};

pub const DEFAULT_RADIUS: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_views: usize,
    pub increment_deg: f64,
    pub n_facade: usize,
    /// Require the planned views to close the full circle.
    pub full_circle: bool,
    pub elevation: f64,
    pub fov_y: f64,
    pub resolution: usize,
    pub radius: f64,
    pub eval_views: bool,
    pub zoning: bool,
    pub painter: PainterKind,
    pub painter_timeout_secs: u64,
    pub diffusion_steps: usize,
    pub consistency: ConsistencyKind,
    pub confirm: ConfirmMode,
    pub seed: u64,
    pub tolerance: f64,
    pub zone_threshold: f64,
    pub w_refine: f64,
    pub fusion: FusionParams,
    /// Surface samples per unit area of the normalized scene.
    pub density: f64,
    /// Remesh target edge in normalized-scene units; 0 disables remeshing.
    pub target_edge: f64,
    pub object: String,
    pub modifier: Option<String>,
    pub up: [f64; 3],
    pub front: [f64; 3],
    /// Marching-cubes cells along the longest axis for point-cloud inputs.
    pub pointcloud_grid: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_views: 9,
            increment_deg: 40.0,
            n_facade: 5,
            full_circle: true,
            elevation: 0.0,
            fov_y: 60.0,
            resolution: 512,
            radius: DEFAULT_RADIUS,
            eval_views: true,
            zoning: true,
            painter: PainterKind::Procedural,
            painter_timeout_secs: crate::protocol::DEFAULT_TIMEOUT.as_secs(),
            diffusion_steps: crate::diffusion::DEFAULT_STEPS,
            consistency: ConsistencyKind::Builtin,
            confirm: ConfirmMode::Auto,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            zone_threshold: DEFAULT_ZONE_THRESHOLD,
            w_refine: crate::diffusion::DEFAULT_REFINE_WEIGHT,
            fusion: FusionParams::default(),
            density: DEFAULT_DENSITY,
            target_edge: DEFAULT_TARGET_EDGE,
            object: "object".into(),
            modifier: None,
            up: [0.0, 1.0, 0.0],
            front: [0.0, 0.0, -1.0],
            pointcloud_grid: DEFAULT_GRID,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_views == 0 {
            return fail("at least one view is required".into());
        }
        if !(self.increment_deg > 0.0 && self.increment_deg < 360.0) {
            return fail(format!(
                "increment {} must lie in (0, 360)",
                self.increment_deg
            ));
        }
        if self.full_circle && self.n_views > 1 {
            let steps = 360.0 / self.increment_deg;
            if (steps - steps.round()).abs() > 1e-9 || steps.round() as usize != self.n_views {
                return fail(format!(
                    "{} views at {}° do not close the circle; use {} views or disable full-circle coverage",
                    self.n_views,
                    self.increment_deg,
                    steps
                ));
            }
        }
        if self.n_facade == 0 {
            return fail("at least one facade view is required".into());
        }
        if !(self.radius > 1.0) {
            return fail(format!(
                "camera radius {} must exceed the unit scene sphere",
                self.radius
            ));
        }
        if !(self.tolerance >= 0.0)
            || !(0.0..=1.0).contains(&self.zone_threshold)
            || !(0.0..=1.0).contains(&self.w_refine)
        {
            return fail("tolerance, zone threshold or refine weight out of range".into());
        }
        if !(self.density > 0.0) || !(self.target_edge >= 0.0) {
            return fail("density must be positive and target edge non-negative".into());
        }
        if self.fusion.k == 0 {
            return fail("fusion needs k >= 1".into());
        }
        if self.object.trim().is_empty() {
            return fail("prompt object is empty".into());
        }
        if self.diffusion_steps == 0 || self.painter_timeout_secs == 0 {
            return fail("diffusion steps and painter timeout must be positive".into());
        }
        SceneFrame::new(Vec3::from(self.up), Vec3::from(self.front))?;
        Camera::new(
            0.0,
            self.elevation,
            self.radius,
            self.fov_y,
            self.resolution,
        )?;
        Ok(())
    }

    pub fn remap_params(&self) -> RemapParams {
        RemapParams {
            tolerance: self.tolerance,
            zone_threshold: self.zone_threshold,
            zoning: self.zoning,
        }
    }

    pub fn painter(&self) -> Painter {
        Painter {
            timeout: Duration::from_secs(self.painter_timeout_secs),
            diffusion_steps: self.diffusion_steps,
            w_refine: self.w_refine,
            ..Painter::new(self.painter.clone())
        }
    }
}

/// Loads a mesh, or meshes a point cloud, in input coordinates.
pub fn load_input(path: &Path, pointcloud_grid: usize) -> Result<(Mesh, bool)> {
    if is_point_cloud(path)? {
        let points = load_points(path)?;
        info!("meshing {} points", points.len());
        Ok((pointcloud_to_mesh(&points, pointcloud_grid)?, true))
    } else {
        Ok((load_mesh(path, MeshFormat::from_path(path)?)?, false))
    }
}

pub fn view_dir_name(i: usize) -> String {
    format!("view_{i:02}")
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub scene: Mesh,
    pub frame: SceneFrame,
    pub plan: ViewPlan,
    pub field: SurfaceColorField,
    pub views: Vec<PaintedView>,
    pub final_renders: Vec<Image>,
    pub colored_mesh: Option<Mesh>,
    pub manifest: Manifest,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    scene: Mesh,
    samples: SurfaceColorField,
    painter: Painter,
}

impl Run<'_> {
    fn fuse(&self, views: &mut [PaintedView], step: usize) -> Result<SurfaceColorField> {
        match &self.cfg.consistency {
            ConsistencyKind::Builtin => {
                let field = fuse_views(&self.samples, views, &self.cfg.fusion)?;
                refresh_views(&field, &self.scene, views, self.cfg.fusion.k)?;
                Ok(field)
            }
            ConsistencyKind::External(cmd) => {
                let dir = self.out.join("consistency").join(format!("step_{step:02}"));
                export_nerf_dataset(views, &dir)?;
                crate::protocol::run_external(cmd, &dir, self.painter.timeout)
                    .map_err(|e| Error::Fusion(format!("consistency tool failed: {e}")))?;
                let renders = import_nerf_renders(&dir, views)?;
                let field = fuse_views(&self.samples, &renders, &self.cfg.fusion)?;
                views.clone_from_slice(&renders);
                Ok(field)
            }
        }
    }

    fn paint(&self, request: &PaintRequest, dir: &Path) -> Result<Image> {
        write_request(request, dir)?;
        self.painter.paint(dir)
    }
}

/// Runs the pipeline, asking for initialization approval on stdin.
pub fn run_pipeline(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<PipelineOutput> {
    let stdin = std::io::stdin();
    let mut lock = stdin.lock();
    run_pipeline_with(cfg, input, out, &mut lock, &mut std::io::stderr())
}

/// As [`run_pipeline`] with explicit terminal streams. On failure the
/// partial outputs stay on disk and a manifest with status `failed` is
/// written.
pub fn run_pipeline_with(
    cfg: &PipelineConfig,
    input: &Path,
    out: &Path,
    answers: &mut dyn BufRead,
    prompt_out: &mut dyn Write,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest::new(cfg, input)?;
    let started = Instant::now();
    let result = execute(cfg, input, out, answers, prompt_out, &mut manifest);
    manifest.total_seconds = started.elapsed().as_secs_f64();
    if let Err(e) = &result {
        manifest.status = RunStatus::Failed;
        manifest.error = Some(e.to_string());
    }
    manifest.artifacts = digest_artifacts(out)?;
    manifest.digest = manifest::combined_digest(&manifest.artifacts);
    manifest.write(out)?;
    result.map(|mut o| {
        o.manifest = manifest;
        o
    })
}

fn execute(
    cfg: &PipelineConfig,
    input: &Path,
    out: &Path,
    answers: &mut dyn BufRead,
    prompt_out: &mut dyn Write,
    manifest: &mut Manifest,
) -> Result<PipelineOutput> {
    let (original, from_points) = load_input(input, cfg.pointcloud_grid)?;
    manifest.pointcloud_input = from_points;
    let frame = SceneFrame::new(Vec3::from(cfg.up), Vec3::from(cfg.front))?;
    let (scene, frame) = normalize_with_frame(&original, &frame)?;
    let plan = plan_views(cfg)?;
    manifest.plan = plan.azimuths();
    info!("view plan: {:?}", manifest.plan);

    let run = Run {
        cfg,
        out,
        samples: sample_surface(&scene, cfg.density, cfg.seed)?,
        scene,
        painter: cfg.painter(),
    };
    let remap_params = cfg.remap_params();
    let mut seed = cfg.seed;
    manifest.seeds.initialization.push(seed);
    let mut views: Vec<PaintedView> = Vec::with_capacity(plan.views.len());

    for pv in &plan.views {
        let i = pv.view_index;
        let mut timing = ViewTiming::new(i, pv.azimuth());
        let cam = pv.camera()?;
        if pv.fuse_before && !views.is_empty() {
            let t = Instant::now();
            run.fuse(&mut views, i)?;
            timing.fuse_seconds = t.elapsed().as_secs_f64();
        }

        let t = Instant::now();
        let maps = render_maps(&run.scene, &cam, Culling::Backface);
        if !maps.depth.data.iter().any(|d| d.is_finite()) {
            return Err(Error::ViewFailed {
                view: i,
                source: Box::new(Error::Degenerate(
                    "geometry is not visible from this view".into(),
                )),
            });
        }
        let res = cfg.resolution;
        let (remap, mask, zones) = if pv.remap_sources.is_empty() {
            (None, Grid::filled(res, res, true), None)
        } else {
            let sources: Vec<&PaintedView> = pv.remap_sources.iter().map(|&s| &views[s]).collect();
            let r = remap_multi(&sources, &cam, &maps.depth, &maps.visibility, &remap_params)?;
            (Some(r.image), r.mask, r.zones)
        };
        timing.remap_seconds = t.elapsed().as_secs_f64();
        let (depth_min, depth_max) = depth_range(&maps.depth);
        let mut request = PaintRequest {
            meta: RequestMeta {
                prompt: build_prompt(&cfg.object, pv.azimuth(), cfg.modifier.as_deref())?,
                view_index: i,
                camera: CameraMeta::from_camera(&cam),
                depth_min,
                depth_max,
                seed,
            },
            depth: maps.depth.clone(),
            remap,
            mask,
            zones,
        };

        let t = Instant::now();
        let dir = out.join("views").join(view_dir_name(i));
        let wrap = |e: Error| Error::ViewFailed {
            view: i,
            source: Box::new(e),
        };
        let mut color = run.paint(&request, &dir).map_err(wrap)?;
        if i == 0 {
            let mut rejections = 0;
            while confirm_initialization(
                &dir.join(crate::protocol::COLOR_FILE),
                cfg.confirm,
                rejections,
                answers,
                prompt_out,
            )? == Decision::Regenerate
            {
                rejections += 1;
                seed = seed.wrapping_add(1);
                manifest.seeds.initialization.push(seed);
                info!("regenerating the first view with seed {seed}");
                request.meta.seed = seed;
                color = run.paint(&request, &dir).map_err(wrap)?;
            }
            manifest.seeds.accepted = seed;
        }
        timing.paint_seconds = t.elapsed().as_secs_f64();
        info!(
            "painted view {i} at {}° in {:.2}s",
            pv.azimuth(),
            timing.paint_seconds
        );
        manifest.timings.push(timing);
        views.push(PaintedView {
            camera: cam,
            color,
            depth: maps.depth,
            visibility: maps.visibility,
            status: ViewStatus::Painted,
        });
    }
    let t = Instant::now();
    let field = run.fuse(&mut views, plan.views.len())?;
    manifest.coverage = report_coverage(&field);
    manifest.final_fusion_seconds = t.elapsed().as_secs_f64();

    let final_dir = out.join("final");
    std::fs::create_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    let final_renders = views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let img = render_fused(&field, &run.scene, &v.camera, cfg.fusion.k)?;
            save_rgb_png(&img, &final_dir.join(format!("{}.png", view_dir_name(i))))?;
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    field.save_ply(&out.join("field.ply"))?;
    if cfg.eval_views {
        let source = EvalSource::Field {
            field: &field,
            mesh: &run.scene,
            k: cfg.fusion.k,
        };
        render_eval_views(
            &source,
            &out.join("eval"),
            cfg.radius,
            cfg.fov_y,
            cfg.resolution,
        )?;
    }

    let colored_mesh = if cfg.target_edge > 0.0 {
        let t = Instant::now();
        // Remesh in input coordinates so exported vertices keep their
        // original positions bit for bit.
        let remeshed = remesh_planar(&original, cfg.target_edge / frame.scale)?;
        let colored = transfer_colors_mapped(&remeshed, &field, cfg.fusion.k, |p| frame.apply(p))?;
        export_colored(&colored, &out.join("mesh_colored.ply"), MeshFormat::Ply)?;
        manifest.export_seconds = t.elapsed().as_secs_f64();
        Some(colored)
    } else {
        None
    };

    Ok(PipelineOutput {
        scene: run.scene,
        frame,
        plan,
        field,
        views,
        final_renders,
        colored_mesh,
        manifest: manifest.clone(),
    })
}

/// Process exit status for a pipeline error: 2 configuration, 3 painter,
/// 4 fusion, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ViewFailed { source, .. } if !source.is_painter_failure() => match **source {
            Error::Fusion(_) | Error::MissingView(_) => 4,
            _ => 3,
        },
        e if e.is_painter_failure() => 3,
        Error::Fusion(_) | Error::MissingView(_) => 4,
        Error::Config(_) | Error::InvalidCamera(_) | Error::Parse { .. } | Error::Schema(_) => 2,
        _ => 1,
    }
}

/// Output location of a finished run's colored mesh.
pub fn colored_mesh_path(out: &Path) -> PathBuf {
    out.join("mesh_colored.ply")
}
