//! Dense per-pixel maps and their PNG encodings.

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb as PixRgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Projection, Vec3};

pub type Rgb = [f32; 3];

/// Row-major `width x height` map. Row 0 is the top image row.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

/// Linear RGB image with channels nominally in [0,1].
pub type Image = Grid<Rgb>;
/// View-space depth along the optical axis; `f64::INFINITY` on background.
pub type DepthMap = Grid<f64>;
/// Visibility score in [0,1]; 0 on background.
pub type VisibilityMap = Grid<f64>;
/// World-space position of the visible fragment.
pub type PositionMap = Grid<Option<Vec3>>;
/// `true` marks a pixel that must be inpainted.
pub type Mask = Grid<bool>;
pub type ZoneMap = Grid<Zone>;

/// Inpainting zone of a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Keep,
    Refine,
    Generate,
}

impl Zone {
    pub fn to_byte(self) -> u8 {
        match self {
            Zone::Keep => 0,
            Zone::Refine => 128,
            Zone::Generate => 255,
        }
    }

    pub fn from_byte(v: u8) -> Option<Zone> {
        match v {
            0 => Some(Zone::Keep),
            128 => Some(Zone::Refine),
            255 => Some(Zone::Generate),
            _ => None,
        }
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        let w = self.width;
        &mut self.data[row * w + col]
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// New grid of the same shape built from flat indices.
    pub fn map_index<U>(&self, f: impl FnMut(usize) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: (0..self.data.len()).map(f).collect(),
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Four bilinear taps `(flat index, weight)` at continuous pixel coordinates
/// (`u` along columns, `v` along rows, pixel centers at integers). Taps are
/// clamped to the grid; coordinates within 1e-9 of a pixel center snap to it
/// so that identity sampling is exact.
pub fn bilinear_taps(width: usize, height: usize, u: f64, v: f64) -> [(usize, f64); 4] {
    let snap = |x: f64| {
        let r = x.round();
        if (x - r).abs() < 1e-9 {
            r
        } else {
            x
        }
    };
    let u = snap(u).clamp(0.0, (width - 1) as f64);
    let v = snap(v).clamp(0.0, (height - 1) as f64);
    let c0 = u.floor() as usize;
    let r0 = v.floor() as usize;
    let c1 = (c0 + 1).min(width - 1);
    let r1 = (r0 + 1).min(height - 1);
    let fu = u - c0 as f64;
    let fv = v - r0 as f64;
    [
        (r0 * width + c0, (1.0 - fu) * (1.0 - fv)),
        (r0 * width + c1, fu * (1.0 - fv)),
        (r1 * width + c0, (1.0 - fu) * fv),
        (r1 * width + c1, fu * fv),
    ]
}

/// Bilinear sample of an RGB image at continuous pixel coordinates.
pub fn sample_rgb(img: &Image, u: f64, v: f64) -> Rgb {
    let mut out = [0.0f64; 3];
    for (idx, w) in bilinear_taps(img.width, img.height, u, v) {
        if w == 0.0 {
            continue;
        }
        let p = img.data[idx];
        for c in 0..3 {
            out[c] += w * p[c] as f64;
        }
    }
    [out[0] as f32, out[1] as f32, out[2] as f32]
}

/// Bilinear sample of a scalar map at continuous pixel coordinates.
pub fn sample_scalar(map: &Grid<f64>, u: f64, v: f64) -> f64 {
    bilinear_taps(map.width, map.height, u, v)
        .iter()
        .filter(|(_, w)| *w != 0.0)
        .map(|&(idx, w)| w * map.data[idx])
        .sum()
}

/// Smaller of the two one-sided differences at a pixel (signed, per pixel),
/// skipping background neighbours. Taking the smoother side keeps the
/// estimate finite across depth discontinuities.
fn robust_slope(d: f64, prev: Option<f64>, next: Option<f64>) -> f64 {
    let back = prev.filter(|p| p.is_finite()).map(|p| d - p);
    let fwd = next.filter(|n| n.is_finite()).map(|n| n - d);
    match (back, fwd) {
        (Some(a), Some(b)) => {
            if a.abs() <= b.abs() {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => 0.0,
    }
}

/// Depth map prepared for depth tests at sub-pixel positions.
#[derive(Debug, Clone)]
pub struct DepthSampler<'a> {
    depth: &'a DepthMap,
    /// Per-pixel slope along columns and rows.
    slope: Vec<(f64, f64)>,
    /// Pixel footprint per unit depth.
    footprint: f64,
}

/// Extra slack on a tap's extrapolated depth, as a fraction of the
/// extrapolation step.
const EXTRAPOLATION_SLACK: f64 = 0.5;

impl<'a> DepthSampler<'a> {
    pub fn new(depth: &'a DepthMap, proj: &Projection) -> Self {
        let (w, h) = (depth.width, depth.height);
        let at = |r: usize, c: usize| depth.data[r * w + c];
        let slope = (0..w * h)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                let d = depth.data[i];
                if !d.is_finite() {
                    return (0.0, 0.0);
                }
                let sx = robust_slope(
                    d,
                    (c > 0).then(|| at(r, c - 1)),
                    (c + 1 < w).then(|| at(r, c + 1)),
                );
                let sy = robust_slope(
                    d,
                    (r > 0).then(|| at(r - 1, c)),
                    (r + 1 < h).then(|| at(r + 1, c)),
                );
                (sx, sy)
            })
            .collect();
        DepthSampler {
            depth,
            slope,
            footprint: 2.0 / (proj.focal() * proj.resolution as f64),
        }
    }

    pub fn depth(&self) -> &DepthMap {
        self.depth
    }

    /// Bilinear taps at `(u, v)` restricted to those whose depth,
    /// extrapolated to `(u, v)` along the local slope, agrees with `z`
    /// within `tol`. Weights are renormalized over the agreeing taps. Taps
    /// that saw something closer are evidence of an occluder; taps that saw
    /// something farther (or nothing) are not, since the point would be in
    /// front of them. `None` when the agreeing taps weigh less than the
    /// closer ones, or when no tap agrees.
    ///
    /// Next to a silhouette (some taps are background) the surface may bend
    /// away steeply before the edge. When the caller knows the point faces
    /// this view (`faces_view`), a point up to `sqrt(2 * footprint)` behind
    /// a foreground tap also agrees: the depth drop within one pixel of the
    /// limb of a surface whose curvature radius is at most 1.
    pub fn agreeing_taps(
        &self,
        u: f64,
        v: f64,
        z: f64,
        tol: f64,
        faces_view: bool,
    ) -> Option<[(usize, f64); 4]> {
        let (w, h) = (self.depth.width, self.depth.height);
        let mut taps = bilinear_taps(w, h, u, v);
        let at_silhouette = faces_view
            && taps
                .iter()
                .any(|&(idx, wt)| wt > 0.0 && !self.depth.data[idx].is_finite());
        let (mut closer, mut agree) = (0.0, 0.0);
        for (idx, wt) in taps.iter_mut() {
            let d = self.depth.data[*idx];
            if *wt <= 0.0 || !d.is_finite() {
                *wt = 0.0;
                continue;
            }
            let (sx, sy) = self.slope[*idx];
            let du = u - (*idx % w) as f64;
            let dv = v - (*idx / w) as f64;
            let step = du * sx + dv * sy;
            let slack = EXTRAPOLATION_SLACK * ((du * sx).abs() + (dv * sy).abs());
            let limb = at_silhouette && z >= d && z - d <= tol + (2.0 * self.footprint * d).sqrt();
            let gap = z - (d + step);
            if limb || gap.abs() <= tol + slack {
                agree += *wt;
            } else {
                if gap > 0.0 {
                    closer += *wt;
                }
                *wt = 0.0;
            }
        }
        if agree <= 0.0 || agree < closer {
            return None;
        }
        for (_, wt) in taps.iter_mut() {
            *wt /= agree;
        }
        Some(taps)
    }
}

#[inline]
pub fn quantize_u8(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png<P, C>(buf: &ImageBuffer<P, C>, path: &Path) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(bytes)
}

fn decode_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes` next to `path` under a temporary name, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn rgb_png_bytes(img: &Image, path: &Path) -> Result<Vec<u8>> {
    let buf: ImageBuffer<PixRgb<u8>, Vec<u8>> =
        ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
            let p = img.get(y as usize, x as usize);
            PixRgb([quantize_u8(p[0]), quantize_u8(p[1]), quantize_u8(p[2])])
        });
    encode_png(&buf, path)
}

/// 8-bit RGB PNG.
pub fn save_rgb_png(img: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &rgb_png_bytes(img, path)?)
}

pub fn load_rgb_png(path: &Path) -> Result<Image> {
    let img = decode_png(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |r, c| {
        let p = img.get_pixel(c as u32, r as u32).0;
        [
            p[0] as f32 / 255.0,
            p[1] as f32 / 255.0,
            p[2] as f32 / 255.0,
        ]
    }))
}

pub fn save_gray8_png(map: &Grid<u8>, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(map.width as u32, map.height as u32, |x, y| {
            Luma([*map.get(y as usize, x as usize)])
        });
    write_atomic(path, &encode_png(&buf, path)?)
}

pub fn load_gray8_png(path: &Path) -> Result<Grid<u8>> {
    let img = decode_png(path)?;
    if !matches!(img.color(), image::ColorType::L8) {
        return Err(Error::Schema(format!(
            "{} must be 8-bit grayscale, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let img = img.to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.into_raw())
}

pub fn save_gray16_png(map: &Grid<u16>, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(map.width as u32, map.height as u32, |x, y| {
            Luma([*map.get(y as usize, x as usize)])
        });
    write_atomic(path, &encode_png(&buf, path)?)
}

pub fn load_gray16_png(path: &Path) -> Result<Grid<u16>> {
    let img = decode_png(path)?;
    if !matches!(img.color(), image::ColorType::L16) {
        return Err(Error::Schema(format!(
            "{} must be 16-bit grayscale, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let img = img.to_luma16();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.into_raw())
}

/// Foreground depth range `(min, max)` with `min < max` guaranteed.
pub fn depth_range(depth: &DepthMap) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &d in depth.data.iter().filter(|d| d.is_finite()) {
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi <= lo {
        hi = lo + 1e-6;
    }
    (lo, hi)
}

/// 16-bit linear depth code: 0 is background, 1..=65535 spans `[min, max]`.
pub fn encode_depth(depth: &DepthMap, min: f64, max: f64) -> Grid<u16> {
    let span = max - min;
    depth.map(|&d| {
        if !d.is_finite() {
            0
        } else {
            let t = ((d - min) / span).clamp(0.0, 1.0);
            1 + (t * 65534.0).round() as u16
        }
    })
}

pub fn decode_depth(code: &Grid<u16>, min: f64, max: f64) -> DepthMap {
    let span = max - min;
    code.map(|&v| {
        if v == 0 {
            f64::INFINITY
        } else {
            min + (v - 1) as f64 / 65534.0 * span
        }
    })
}

/// Unit-interval scalar map as 16-bit code.
pub fn encode_unit16(map: &Grid<f64>) -> Grid<u16> {
    map.map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
}

pub fn decode_unit16(code: &Grid<u16>) -> Grid<f64> {
    code.map(|&v| v as f64 / 65535.0)
}

pub fn mask_to_bytes(mask: &Mask) -> Grid<u8> {
    mask.map(|&m| if m { 255 } else { 0 })
}

pub fn mask_from_bytes(bytes: &Grid<u8>) -> Result<Mask> {
    let mut out = Vec::with_capacity(bytes.data.len());
    for &b in &bytes.data {
        match b {
            0 => out.push(false),
            255 => out.push(true),
            other => {
                return Err(Error::Schema(format!(
                    "mask value {other} not in {{0,255}}"
                )))
            }
        }
    }
    Grid::from_vec(bytes.width, bytes.height, out)
}

pub fn zones_from_bytes(bytes: &Grid<u8>) -> Result<ZoneMap> {
    let mut out = Vec::with_capacity(bytes.data.len());
    for &b in &bytes.data {
        out.push(
            Zone::from_byte(b)
                .ok_or_else(|| Error::Schema(format!("zone value {b} not in {{0,128,255}}")))?,
        );
    }
    Grid::from_vec(bytes.width, bytes.height, out)
}

/// Peak signal-to-noise ratio in dB over pixels where `select` is true,
/// with signal range 1.
pub fn psnr(a: &Image, b: &Image, select: impl Fn(usize) -> bool) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for (i, (pa, pb)) in a.data.iter().zip(&b.data).enumerate() {
        if !select(i) {
            continue;
        }
        for c in 0..3 {
            let d = (pa[c] - pb[c]) as f64;
            se += d * d;
        }
        n += 3;
    }
    if n == 0 || se == 0.0 {
        return f64::INFINITY;
    }
    -10.0 * (se / n as f64).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_code_error_is_within_one_step() {
        let depth = Grid::from_fn(7, 5, |r, c| {
            if r == 0 && c == 0 {
                f64::INFINITY
            } else {
                1.3 + 0.0137 * (r * 7 + c) as f64
            }
        });
        let (lo, hi) = depth_range(&depth);
        let back = decode_depth(&encode_depth(&depth, lo, hi), lo, hi);
        assert!(back.data[0].is_infinite());
        let bound = (hi - lo) / 65535.0;
        for (a, b) in depth.data.iter().zip(&back.data).skip(1) {
            assert!((a - b).abs() <= bound, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_taps_are_exact() {
        let taps = bilinear_taps(4, 4, 2.0 + 1e-12, 1.0);
        assert_eq!(taps[0], (6, 1.0));
        assert_eq!(taps[1].1, 0.0);
    }

    #[test]
    fn zone_bytes_round_trip() {
        for z in [Zone::Keep, Zone::Refine, Zone::Generate] {
            assert_eq!(Zone::from_byte(z.to_byte()), Some(z));
        }
        assert_eq!(Zone::from_byte(17), None);
    }

    #[test]
    fn rgb_png_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let img = Grid::from_fn(9, 4, |r, c| {
            [r as f32 / 255.0, c as f32 * 7.0 / 255.0, 200.0 / 255.0]
        });
        save_rgb_png(&img, &path).unwrap();
        let back = load_rgb_png(&path).unwrap();
        save_rgb_png(&back, &path).unwrap();
        assert_eq!(load_rgb_png(&path).unwrap(), back);
        assert_eq!(back, img);
    }
}
