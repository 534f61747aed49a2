//! File protocol between the pipeline and painters.
//!
//! A request directory holds `depth.png` (16-bit), `mask.png` (0/255),
//! optional `remap.png` and `zones.png`, and `meta.json`. A painter answers
//! with `color.png` followed by `done.json`; the latter is always written
//! last so its presence marks a complete response.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    downsample_mask, masked_generate, Conditioning, NoiseSchedule, OracleDenoiser,
};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Vec3};
use crate::grid::{
    decode_depth, encode_depth, load_gray16_png, load_gray8_png, load_rgb_png, mask_from_bytes,
    mask_to_bytes, save_gray16_png, save_gray8_png, save_rgb_png, write_atomic, zones_from_bytes,
    DepthMap, Grid, Image, Mask, Rgb, ZoneMap,
};

pub const DEPTH_FILE: &str = "depth.png";
pub const REMAP_FILE: &str = "remap.png";
pub const MASK_FILE: &str = "mask.png";
pub const ZONES_FILE: &str = "zones.png";
pub const META_FILE: &str = "meta.json";
pub const COLOR_FILE: &str = "color.png";
pub const DONE_FILE: &str = "done.json";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraMeta {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub resolution: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraMeta {
    pub fn from_camera(cam: &Camera) -> Self {
        CameraMeta {
            azimuth: cam.azimuth,
            elevation: cam.elevation,
            radius: cam.radius,
            fov_y: cam.fov_y,
            resolution: cam.resolution,
            near: cam.near,
            far: cam.far,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            self.azimuth,
            self.elevation,
            self.radius,
            self.fov_y,
            self.resolution,
        )?
        .with_clip(self.near, self.far)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub prompt: String,
    pub view_index: usize,
    pub camera: CameraMeta,
    pub depth_min: f64,
    pub depth_max: f64,
    pub seed: u64,
}

/// In-memory view of a request directory.
#[derive(Debug, Clone, PartialEq)]
pub struct PaintRequest {
    pub meta: RequestMeta,
    pub depth: DepthMap,
    pub remap: Option<Image>,
    pub mask: Mask,
    pub zones: Option<ZoneMap>,
}

impl PaintRequest {
    pub fn camera(&self) -> Result<Camera> {
        self.meta.camera.to_camera()
    }

    fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let res = m.camera.resolution;
        if !(m.depth_min.is_finite() && m.depth_max.is_finite() && m.depth_min < m.depth_max) {
            return Err(Error::Schema(format!(
                "depth range [{}, {}] is invalid",
                m.depth_min, m.depth_max
            )));
        }
        let square = |w: usize, h: usize, what: &str| {
            if (w, h) == (res, res) {
                Ok(())
            } else {
                Err(Error::Schema(format!(
                    "{what} is {w}x{h}, expected {res}x{res}"
                )))
            }
        };
        square(self.depth.width, self.depth.height, DEPTH_FILE)?;
        square(self.mask.width, self.mask.height, MASK_FILE)?;
        if let Some(r) = &self.remap {
            square(r.width, r.height, REMAP_FILE)?;
        }
        if let Some(z) = &self.zones {
            square(z.width, z.height, ZONES_FILE)?;
        }
        self.camera().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoneRecord {
    pub status: Status,
    pub painter_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

fn remove_if_present(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Writes every request file atomically and clears any stale response.
pub fn write_request(req: &PaintRequest, dir: &Path) -> Result<()> {
    req.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    remove_if_present(&dir.join(DONE_FILE))?;
    remove_if_present(&dir.join(COLOR_FILE))?;
    let m = &req.meta;
    save_gray16_png(
        &encode_depth(&req.depth, m.depth_min, m.depth_max),
        &dir.join(DEPTH_FILE),
    )?;
    save_gray8_png(&mask_to_bytes(&req.mask), &dir.join(MASK_FILE))?;
    match &req.remap {
        Some(r) => save_rgb_png(r, &dir.join(REMAP_FILE))?,
        None => remove_if_present(&dir.join(REMAP_FILE))?,
    }
    match &req.zones {
        Some(z) => save_gray8_png(&z.map(|z| z.to_byte()), &dir.join(ZONES_FILE))?,
        None => remove_if_present(&dir.join(ZONES_FILE))?,
    }
    write_json(m, &dir.join(META_FILE))
}

pub fn read_request(dir: &Path) -> Result<PaintRequest> {
    let meta: RequestMeta = read_json(&dir.join(META_FILE))?;
    let depth = decode_depth(
        &load_gray16_png(&dir.join(DEPTH_FILE))?,
        meta.depth_min,
        meta.depth_max,
    );
    let mask = mask_from_bytes(&load_gray8_png(&dir.join(MASK_FILE))?)?;
    let optional = |name: &str| {
        let p = dir.join(name);
        p.exists().then_some(p)
    };
    let remap = optional(REMAP_FILE).map(|p| load_rgb_png(&p)).transpose()?;
    let zones = optional(ZONES_FILE)
        .map(|p| load_gray8_png(&p).and_then(|b| zones_from_bytes(&b)))
        .transpose()?;
    let req = PaintRequest {
        meta,
        depth,
        remap,
        mask,
        zones,
    };
    req.validate()?;
    Ok(req)
}

pub fn write_response(dir: &Path, color: &Image, painter_id: &str) -> Result<()> {
    save_rgb_png(color, &dir.join(COLOR_FILE))?;
    write_json(
        &DoneRecord {
            status: Status::Ok,
            painter_id: painter_id.to_string(),
            message: None,
        },
        &dir.join(DONE_FILE),
    )
}

pub fn write_error_response(dir: &Path, painter_id: &str, message: &str) -> Result<()> {
    write_json(
        &DoneRecord {
            status: Status::Error,
            painter_id: painter_id.to_string(),
            message: Some(message.to_string()),
        },
        &dir.join(DONE_FILE),
    )
}

/// Reads and validates a completed response.
pub fn read_response(dir: &Path, resolution: usize) -> Result<(DoneRecord, Image)> {
    let done_path = dir.join(DONE_FILE);
    if !done_path.exists() {
        return Err(Error::Schema(format!(
            "{} was not written",
            done_path.display()
        )));
    }
    let done: DoneRecord = read_json(&done_path)?;
    if done.status == Status::Error {
        return Err(Error::PainterReported(format!(
            "{}: {}",
            done.painter_id,
            done.message.as_deref().unwrap_or("no message")
        )));
    }
    let color = load_rgb_png(&dir.join(COLOR_FILE))?;
    if (color.width, color.height) != (resolution, resolution) {
        return Err(Error::Schema(format!(
            "{COLOR_FILE} is {}x{}, expected {resolution}x{resolution}",
            color.width, color.height
        )));
    }
    Ok((done, color))
}

/// Deterministic view-independent color field: a smooth linear gradient
/// plus a soft 3D checker. Values stay inside [0.1, 0.9] for |p| ≤ 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProceduralField {
    gradient: [Vec3; 3],
    checker_phase: Vec3,
}

const CHECKER_PERIOD: f64 = 0.5;
const CHECKER_SHARPNESS: f64 = 1.5;
const CHECKER_AMPLITUDE: f64 = 0.06;
const GRADIENT_SCALE: f64 = 0.25;

impl ProceduralField {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = || loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                break v / n;
            }
        };
        let gradient = [unit(), unit(), unit()];
        let checker_phase = unit() * CHECKER_PERIOD;
        ProceduralField {
            gradient,
            checker_phase,
        }
    }

    pub fn color(&self, p: &Vec3) -> Rgb {
        let q = (p + self.checker_phase) * (std::f64::consts::PI / CHECKER_PERIOD);
        let soft = |x: f64| (CHECKER_SHARPNESS * x.sin()).tanh() / CHECKER_SHARPNESS.tanh();
        let checker = CHECKER_AMPLITUDE * soft(q.x) * soft(q.y) * soft(q.z);
        [0, 1, 2].map(|c| {
            (0.5 + GRADIENT_SCALE * self.gradient[c].dot(p) + checker).clamp(0.0, 1.0) as f32
        })
    }

    /// Colors every foreground pixel by unprojecting its depth.
    pub fn render(&self, cam: &Camera, depth: &DepthMap) -> Image {
        let proj = cam.projection();
        Grid::from_fn(depth.width, depth.height, |r, c| {
            let d = *depth.get(r, c);
            if !d.is_finite() {
                return [0.0; 3];
            }
            let (x, y) = proj.pixel_center_ndc(r, c);
            self.color(&cam.unproject(x, y, d))
        })
    }
}

/// Replaces constrained pixels (mask 0) by the remapped colors.
fn keep_remapped(mut img: Image, req: &PaintRequest) -> Image {
    if let Some(remap) = &req.remap {
        for (i, px) in img.data.iter_mut().enumerate() {
            if !req.mask.data[i] && req.depth.data[i].is_finite() {
                *px = remap.data[i];
            }
        }
    }
    img
}

/// Built-in painter that paints the procedural field.
pub fn procedural_painter(req: &PaintRequest) -> Result<Image> {
    let cam = req.camera()?;
    let field = ProceduralField::new(req.meta.seed);
    Ok(keep_remapped(field.render(&cam, &req.depth), req))
}

/// Built-in painter running the masked blend loop with an oracle denoiser
/// aimed at the procedural field.
pub fn diffusion_painter(req: &PaintRequest, steps: usize, w_refine: f64) -> Result<Image> {
    let cam = req.camera()?;
    let target = ProceduralField::new(req.meta.seed).render(&cam, &req.depth);
    let schedule = NoiseSchedule::linear(steps)?;
    let den = OracleDenoiser::new(&target, schedule.clone());
    let res = req.meta.camera.resolution;
    let constraint = req
        .remap
        .clone()
        .unwrap_or_else(|| Grid::filled(res, res, [0.0; 3]));
    let mask = downsample_mask(&req.mask, req.zones.as_ref(), 1, w_refine)?;
    let cond = Conditioning {
        depth: Some(&req.depth),
        prompt: &req.meta.prompt,
        seed: req.meta.seed,
    };
    let mut out = masked_generate(&den, &constraint, &mask, &cond, &schedule, req.meta.seed)?;
    for (px, d) in out.data.iter_mut().zip(&req.depth.data) {
        if !d.is_finite() {
            *px = [0.0; 3];
        }
    }
    Ok(out)
}

/// Which painter serves requests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PainterKind {
    Procedural,
    MaskedDiffusion,
    /// Shell command template; `{dir}` is replaced by the request directory.
    External(String),
}

impl fmt::Display for PainterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PainterKind::Procedural => f.write_str("procedural"),
            PainterKind::MaskedDiffusion => f.write_str("masked-diffusion"),
            PainterKind::External(cmd) => write!(f, "external:{cmd}"),
        }
    }
}

impl FromStr for PainterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "procedural" => Ok(PainterKind::Procedural),
            "masked-diffusion" => Ok(PainterKind::MaskedDiffusion),
            _ => match s.strip_prefix("external:") {
                Some(cmd) if cmd.contains("{dir}") => Ok(PainterKind::External(cmd.to_string())),
                Some(_) => Err(Error::Config(
                    "external painter command must contain {dir}".into(),
                )),
                None => Err(Error::Config(format!("unknown painter '{s}'"))),
            },
        }
    }
}

impl Serialize for PainterKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PainterKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// A painter bound to its runtime settings.
#[derive(Debug, Clone)]
pub struct Painter {
    pub kind: PainterKind,
    pub timeout: Duration,
    pub diffusion_steps: usize,
    pub w_refine: f64,
}

impl Painter {
    pub fn new(kind: PainterKind) -> Self {
        Painter {
            kind,
            timeout: DEFAULT_TIMEOUT,
            diffusion_steps: crate::diffusion::DEFAULT_STEPS,
            w_refine: crate::diffusion::DEFAULT_REFINE_WEIGHT,
        }
    }

    pub fn id(&self) -> String {
        self.kind.to_string()
    }

    /// Serves the request in `dir` and returns the validated color image.
    pub fn paint(&self, dir: &Path) -> Result<Image> {
        let meta: RequestMeta = read_json(&dir.join(META_FILE))?;
        self.serve(dir)?;
        Ok(read_response(dir, meta.camera.resolution)?.1)
    }

    /// Leaves `color.png` and `done.json` in `dir`.
    pub fn serve(&self, dir: &Path) -> Result<()> {
        match &self.kind {
            PainterKind::External(template) => run_external(template, dir, self.timeout),
            kind => {
                let id = self.id();
                let painted = read_request(dir).and_then(|req| match kind {
                    PainterKind::Procedural => procedural_painter(&req),
                    _ => diffusion_painter(&req, self.diffusion_steps, self.w_refine),
                });
                match painted {
                    Ok(img) => write_response(dir, &img, &id),
                    Err(e) => {
                        write_error_response(dir, &id, &e.to_string())?;
                        Err(e)
                    }
                }
            }
        }
    }
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.to_string_lossy().replace('\'', r"'\''"))
}

/// Runs an external painter and waits for it to exit. A partial response
/// left by a killed or failed process is never read.
pub fn run_external(template: &str, dir: &Path, timeout: Duration) -> Result<()> {
    if !template.contains("{dir}") {
        return Err(Error::Config(
            "external painter command must contain {dir}".into(),
        ));
    }
    remove_if_present(&dir.join(DONE_FILE))?;
    remove_if_present(&dir.join(COLOR_FILE))?;
    let cmd = template.replace("{dir}", &shell_quote(dir));
    debug!("spawning painter: {cmd}");
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::io(PathBuf::from("sh"), e))?;
    let mut stderr = child.stderr.take().expect("piped stderr");
    let reader = std::thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr.read_to_string(&mut s);
        s
    });
    let start = Instant::now();
    let status = loop {
        match child.try_wait().map_err(|e| Error::io(dir, e))? {
            Some(status) => break status,
            None if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                warn!(
                    "painter exceeded {timeout:?}; discarding partial output in {}",
                    dir.display()
                );
                return Err(Error::PainterTimeout(timeout));
            }
            None => std::thread::sleep(Duration::from_millis(10)),
        }
    };
    let stderr = reader.join().unwrap_or_default();
    if !status.success() {
        return Err(Error::PainterExit {
            code: status.code(),
            stderr: stderr.trim().to_string(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::primitives;
    use crate::grid::depth_range;
    use crate::raster::{render_depth, Culling};

    fn request(az: f64, res: usize, with_remap: bool) -> PaintRequest {
        let cam = Camera::new(az, 0.0, 2.5, 60.0, res).unwrap();
        let depth = render_depth(&primitives::icosphere(1.0, 3), &cam, Culling::Backface);
        let (depth_min, depth_max) = depth_range(&depth);
        PaintRequest {
            meta: RequestMeta {
                prompt: "A photo of ball, front view".into(),
                view_index: 0,
                camera: CameraMeta::from_camera(&cam),
                depth_min,
                depth_max,
                seed: 4,
            },
            mask: depth.map(|d| !d.is_finite() || with_remap && *d > 2.0),
            remap: with_remap.then(|| Grid::filled(res, res, [0.2f32, 0.4, 0.6])),
            zones: None,
            depth,
        }
    }

    #[test]
    fn request_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let req = request(20.0, 32, true);
        write_request(&req, tmp.path()).unwrap();
        let back = read_request(tmp.path()).unwrap();
        assert_eq!(back.meta, req.meta);
        assert_eq!(back.mask, req.mask);
        assert_eq!(back.remap, req.remap);
        let bound = (req.meta.depth_max - req.meta.depth_min) / 65535.0;
        for (a, b) in req.depth.data.iter().zip(&back.depth.data) {
            assert!(a == b || (a - b).abs() <= bound);
        }
        let files = |p: &Path| -> Vec<Vec<u8>> {
            [DEPTH_FILE, MASK_FILE, REMAP_FILE]
                .iter()
                .map(|f| std::fs::read(p.join(f)).unwrap())
                .collect()
        };
        let tmp2 = tempfile::tempdir().unwrap();
        write_request(&back, tmp2.path()).unwrap();
        assert_eq!(files(tmp.path()), files(tmp2.path()));
    }

    #[test]
    fn first_view_has_no_remap() {
        let tmp = tempfile::tempdir().unwrap();
        let mut req = request(0.0, 16, false);
        req.mask = Grid::filled(16, 16, true);
        write_request(&req, tmp.path()).unwrap();
        assert!(!tmp.path().join(REMAP_FILE).exists());
        assert!(load_gray8_png(&tmp.path().join(MASK_FILE))
            .unwrap()
            .data
            .iter()
            .all(|b| *b == 255));
    }

    #[test]
    fn unwritable_dir_reports_path() {
        let tmp = tempfile::tempdir().unwrap();
        let file = tmp.path().join("blocker");
        std::fs::write(&file, b"x").unwrap();
        match write_request(&request(0.0, 8, false), &file.join("sub")) {
            Err(Error::Io { path, .. }) => assert!(path.starts_with(&file)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn procedural_consistency_across_views() {
        // Every painted pixel must match the field at the true surface point
        // behind it, so a point seen from two cameras gets the same color.
        let mesh = primitives::icosphere(1.0, 3);
        let field = ProceduralField::new(4);
        for az in [0.0, 40.0] {
            let tmp = tempfile::tempdir().unwrap();
            let req = request(az, 128, false);
            write_request(&req, tmp.path()).unwrap();
            let img = procedural_painter(&read_request(tmp.path()).unwrap()).unwrap();
            let pos = crate::raster::render_position(&mesh, &req.camera().unwrap());
            for (px, p) in img.data.iter().zip(&pos.data) {
                match p {
                    Some(p) => {
                        let want = field.color(p);
                        for c in 0..3 {
                            assert!((px[c] - want[c]).abs() <= 2.0 / 255.0);
                        }
                    }
                    None => assert_eq!(*px, [0.0; 3]),
                }
            }
            assert_eq!(
                img,
                procedural_painter(&read_request(tmp.path()).unwrap()).unwrap()
            );
        }
    }

    #[test]
    fn procedural_keeps_remapped_pixels() {
        let req = request(0.0, 32, true);
        let img = procedural_painter(&req).unwrap();
        for i in 0..img.data.len() {
            if !req.mask.data[i] {
                assert_eq!(img.data[i], [0.2, 0.4, 0.6]);
            }
        }
    }

    #[test]
    fn field_range_and_smoothness() {
        let f = ProceduralField::new(9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let p = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let p = if p.norm() > 1.0 { p.normalize() } else { p };
            let c = f.color(&p);
            assert!(c.iter().all(|v| (0.1..=0.9).contains(v)), "{c:?}");
            let q = p + Vec3::new(1e-3, -1e-3, 1e-3);
            let d = f.color(&q);
            for k in 0..3 {
                assert!(((c[k] - d[k]) as f64).abs() < 1.6e-3);
            }
        }
        assert_ne!(ProceduralField::new(1), ProceduralField::new(2));
    }

    #[test]
    fn in_process_painters_answer_through_files() {
        let tmp = tempfile::tempdir().unwrap();
        let req = request(10.0, 16, true);
        write_request(&req, tmp.path()).unwrap();
        let a = Painter::new(PainterKind::Procedural)
            .paint(tmp.path())
            .unwrap();
        let done: DoneRecord = read_json(&tmp.path().join(DONE_FILE)).unwrap();
        assert_eq!(
            (done.status, done.painter_id.as_str()),
            (Status::Ok, "procedural")
        );
        let b = Painter::new(PainterKind::MaskedDiffusion)
            .paint(tmp.path())
            .unwrap();
        let want = load_rgb_png(&tmp.path().join(COLOR_FILE)).unwrap();
        assert_eq!(b, want);
        for i in 0..a.data.len() {
            for c in 0..3 {
                assert!((a.data[i][c] - b.data[i][c]).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn painter_kind_parsing() {
        assert_eq!(
            "procedural".parse::<PainterKind>().unwrap(),
            PainterKind::Procedural
        );
        let ext: PainterKind = "external:cp x {dir}".parse().unwrap();
        assert_eq!(ext.to_string(), "external:cp x {dir}");
        assert!("external:echo".parse::<PainterKind>().is_err());
        assert!("magic".parse::<PainterKind>().is_err());
        let json = serde_json::to_string(&PainterKind::MaskedDiffusion).unwrap();
        assert_eq!(
            serde_json::from_str::<PainterKind>(&json).unwrap(),
            PainterKind::MaskedDiffusion
        );
    }

    #[cfg(unix)]
    #[test]
    fn external_painter_outcomes() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        write_request(&request(0.0, 16, true), dir).unwrap();
        let echo = r#"cp {dir}/remap.png {dir}/color.png && printf '{"status":"ok","painter_id":"echo"}' > {dir}/done.json"#;
        let img = Painter::new(PainterKind::External(echo.into()))
            .paint(dir)
            .unwrap();
        assert_eq!(img, load_rgb_png(&dir.join(REMAP_FILE)).unwrap());

        let mut slow = Painter::new(PainterKind::External(format!(
            "cp {{dir}}/remap.png {{dir}}/color.png; sleep 5; {}",
            "true"
        )));
        slow.timeout = Duration::from_millis(200);
        assert!(matches!(slow.paint(dir), Err(Error::PainterTimeout(_))));

        let failing = Painter::new(PainterKind::External(
            "echo nope >&2; exit 3 # {dir}".into(),
        ));
        match failing.paint(dir) {
            Err(Error::PainterExit {
                code: Some(3),
                stderr,
            }) => assert_eq!(stderr, "nope"),
            other => panic!("{other:?}"),
        }

        let tiny = Grid::filled(4, 4, [0.0f32; 3]);
        save_rgb_png(&tiny, &tmp.path().join("tiny.png")).unwrap();
        let wrong = format!(
            r#"cp {}/tiny.png {{dir}}/color.png && printf '{{"status":"ok","painter_id":"x"}}' > {{dir}}/done.json"#,
            tmp.path().display()
        );
        assert!(matches!(
            Painter::new(PainterKind::External(wrong)).paint(dir),
            Err(Error::Schema(_))
        ));

        let silent = Painter::new(PainterKind::External("true {dir}".into()));
        assert!(matches!(silent.paint(dir), Err(Error::Schema(_))));

        let reported =
            r#"printf '{"status":"error","painter_id":"x","message":"oom"}' > {dir}/done.json"#;
        assert!(matches!(
            Painter::new(PainterKind::External(reported.into())).paint(dir),
            Err(Error::PainterReported(_))
        ));
    }
}
