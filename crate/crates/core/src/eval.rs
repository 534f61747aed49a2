//! Distribution distances over feature files, pairwise-preference scoring
//! and the fixed evaluation views.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{render_fused, SurfaceColorField};
use crate::geometry::{Camera, Mesh};
use crate::grid::{save_rgb_png, Image};
use crate::raster::render_color;

pub const FEATURE_MAGIC: &[u8; 8] = b"R3DFEAT\0";
pub const EVAL_AZIMUTHS: [f64; 8] = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0];

/// `n x d` feature matrix, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub extractor_id: String,
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(
        extractor_id: impl Into<String>,
        n: usize,
        d: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "{n}x{d} features need {} values, got {}",
                n * d,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(
                "feature matrix has non-finite entries".into(),
            ));
        }
        Ok(FeatureSet {
            extractor_id: extractor_id.into(),
            n,
            d,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.data)
    }
}

/// Binary layout: magic, u64 n, u64 d, u32 id length, id bytes, then
/// `n * d` little-endian f32 values row by row.
pub fn write_features(set: &FeatureSet, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(28 + set.extractor_id.len() + 4 * set.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(set.n as u64).to_le_bytes());
    out.extend_from_slice(&(set.d as u64).to_le_bytes());
    out.extend_from_slice(&(set.extractor_id.len() as u32).to_le_bytes());
    out.extend_from_slice(set.extractor_id.as_bytes());
    for v in &set.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    crate::grid::write_atomic(path, &out)
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::parse(path, msg.to_string());
    if bytes.len() < 28 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("not a feature file (bad magic)"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (n, d) = (u64_at(8) as usize, u64_at(16) as usize);
    let id_len = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
    let body = 28 + id_len;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(body))
        .ok_or_else(|| bad("header sizes overflow"))?;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "expected {expected} bytes for {n}x{d}, found {}",
            bytes.len()
        )));
    }
    let id = String::from_utf8(bytes[28..body].to_vec())
        .map_err(|_| bad("extractor id is not UTF-8"))?;
    let data = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureSet::new(id, n, d, data)
}

fn check_dims(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.d != b.d {
        return Err(Error::DimensionMismatch(format!(
            "feature widths {} and {}",
            a.d, b.d
        )));
    }
    Ok(())
}

fn mean_cov(set: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let m = set.matrix();
    let mu = DVector::from_iterator(set.d, m.column_iter().map(|c| c.mean()));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (set.n as f64 - 1.0);
    (mu, cov)
}

/// Eigenvalues of a symmetric PSD matrix; small negatives from rounding
/// are clipped, larger ones are an error.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = m.trace().abs().max(f64::MIN_POSITIVE);
    for l in eig.eigenvalues.iter_mut() {
        if !l.is_finite() {
            return Err(Error::MatrixSqrt(format!(
                "{what} has non-finite eigenvalues"
            )));
        }
        if *l < 0.0 {
            if *l < -1e-8 * scale {
                return Err(Error::MatrixSqrt(format!(
                    "{what} has eigenvalue {l} below tolerance"
                )));
            }
            *l = 0.0;
        }
    }
    Ok(eig)
}

fn sqrtm(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let s = eig.eigenvalues.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_dims(a, b)?;
    if a.n < 2 || b.n < 2 {
        return Err(Error::Config("FID needs at least two rows per set".into()));
    }
    let (mu1, s1) = mean_cov(a);
    let (mu2, s2) = mean_cov(b);
    let r1 = sqrtm(&s1, "first covariance")?;
    let inner = &r1 * &s2 * &r1;
    let tr_sqrt: f64 = psd_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.sqrt())
        .sum();
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidResult {
    pub mean: f64,
    pub std: f64,
    pub subsets: usize,
    pub subset_size: usize,
}

pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² between two equally sized row subsets; diagonal terms are
/// excluded from all three kernel sums.
pub fn mmd2_unbiased(a: &FeatureSet, ia: &[usize], b: &FeatureSet, ib: &[usize]) -> f64 {
    let m = ia.len();
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            kxx += poly_kernel(a.row(ia[i]), a.row(ia[j]));
            kyy += poly_kernel(b.row(ib[i]), b.row(ib[j]));
            kxy += poly_kernel(a.row(ia[i]), b.row(ib[j]));
        }
    }
    let norm = (m * (m - 1)) as f64;
    (kxx + kyy - 2.0 * kxy) / norm
}

/// Kernel distance averaged over random subsets. Equal-sized inputs share
/// subset indices. `subset_size` is clamped to the smaller set.
pub fn kid(
    a: &FeatureSet,
    b: &FeatureSet,
    subsets: usize,
    subset_size: usize,
    seed: u64,
) -> Result<KidResult> {
    check_dims(a, b)?;
    let max = a.n.min(b.n);
    if max < 2 {
        return Err(Error::Config("KID needs at least two rows per set".into()));
    }
    if subsets == 0 {
        return Err(Error::Config("KID needs at least one subset".into()));
    }
    let m = if subset_size > max {
        warn!("KID subset size {subset_size} exceeds set size {max}; clamping");
        max
    } else {
        subset_size.max(2)
    };
    let values: Vec<f64> = (0..subsets)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_add(s as u64)
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
                if m == n {
                    (0..n).collect()
                } else {
                    let mut v = rand::seq::index::sample(rng, n, m).into_vec();
                    v.sort_unstable();
                    v
                }
            };
            let ia = pick(a.n, &mut rng);
            let ib = if a.n == b.n {
                ia.clone()
            } else {
                pick(b.n, &mut rng)
            };
            mmd2_unbiased(a, &ia, b, &ib)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / subsets as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / subsets as f64;
    Ok(KidResult {
        mean,
        std: var.sqrt(),
        subsets,
        subset_size: m,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtScore {
    pub item: String,
    pub score: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtResult {
    pub scores: Vec<BtScore>,
    pub iterations: usize,
    /// False when some item never wins or never loses against the rest;
    /// scores then come from a lightly regularized fit and the intervals
    /// are unbounded.
    pub identifiable: bool,
}

/// Reads `winner,loser` lines; a literal header line is skipped.
pub fn read_votes(path: &Path) -> Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut votes = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::parse(
                path,
                format!("record {} has {} fields, expected 2", line + 1, rec.len()),
            ));
        }
        if line == 0
            && rec[0].eq_ignore_ascii_case("winner")
            && rec[1].eq_ignore_ascii_case("loser")
        {
            continue;
        }
        if rec[0].is_empty() || rec[1].is_empty() || rec[0] == rec[1] {
            return Err(Error::parse(
                path,
                format!("record {} is not a valid vote", line + 1),
            ));
        }
        votes.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(votes)
}

fn components(n: usize, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![s];
        seen[s] = true;
        let mut k = 0;
        while k < comp.len() {
            for &t in &adj[comp[k]] {
                if !seen[t] {
                    seen[t] = true;
                    comp.push(t);
                }
            }
            k += 1;
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maximum-likelihood Bradley-Terry log-scores summing to zero, with 95%
/// intervals from the pseudo-inverse of the observed information.
pub fn bradley_terry(votes: &[(String, String)]) -> Result<BtResult> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (w, l) in votes {
        index.insert(w, 0);
        index.insert(l, 0);
    }
    let names: Vec<String> = index.keys().map(|s| s.to_string()).collect();
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let n = names.len();
    if n < 2 {
        return Err(Error::Config(
            "Bradley-Terry needs votes over at least two items".into(),
        ));
    }
    let mut wins = DMatrix::<f64>::zeros(n, n);
    for (w, l) in votes {
        wins[(index[w.as_str()], index[l.as_str()])] += 1.0;
    }
    let mut undirected = vec![Vec::new(); n];
    let mut forward = vec![Vec::new(); n];
    let mut backward = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if wins[(i, j)] > 0.0 {
                undirected[i].push(j);
                undirected[j].push(i);
                forward[i].push(j);
                backward[j].push(i);
            }
        }
    }
    let comps = components(n, &undirected);
    if comps.len() > 1 {
        return Err(Error::Disconnected(
            comps
                .iter()
                .map(|c| c.iter().map(|&i| names[i].clone()).collect())
                .collect(),
        ));
    }
    let reach = |adj: &[Vec<usize>]| {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &t in &adj[v] {
                if !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen.iter().all(|s| *s)
    };
    let identifiable = reach(&forward) && reach(&backward);
    let ridge = if identifiable { 0.0 } else { 1e-3 };

    let loglik = |s: &DVector<f64>| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            for j in 0..n {
                if wins[(i, j)] > 0.0 {
                    ll += wins[(i, j)] * sigmoid(s[i] - s[j]).ln();
                }
            }
        }
        ll - 0.5 * ridge * s.norm_squared()
    };
    let grad_info = |s: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(n);
        let mut info = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let games = wins[(i, j)] + wins[(j, i)];
                if games == 0.0 {
                    continue;
                }
                let p = sigmoid(s[i] - s[j]);
                let r = wins[(i, j)] - games * p;
                g[i] += r;
                g[j] -= r;
                let h = games * p * (1.0 - p);
                info[(i, i)] += h;
                info[(j, j)] += h;
                info[(i, j)] -= h;
                info[(j, i)] -= h;
            }
        }
        g -= s * ridge;
        for i in 0..n {
            info[(i, i)] += ridge;
        }
        (g, info)
    };

    let ones = DMatrix::from_element(n, n, 1.0 / n as f64);
    let mut s = DVector::<f64>::zeros(n);
    // the gradient is a sum over votes; its rounding floor grows with them
    let gtol = 1e-10 * (votes.len() as f64).max(1.0);
    let mut iterations = 0;
    loop {
        let (g, info) = grad_info(&s);
        if g.norm() <= gtol {
            break;
        }
        if iterations >= 200 {
            return Err(Error::Config(format!(
                "Bradley-Terry fit did not converge (gradient norm {:.3e})",
                g.norm()
            )));
        }
        iterations += 1;
        let step = (&info + &ones)
            .lu()
            .solve(&g)
            .ok_or_else(|| Error::Degenerate("singular information matrix".into()))?;
        if step.amax() <= 1e-12 * s.amax().max(1.0) {
            break;
        }
        let base = loglik(&s);
        let mut t = 1.0;
        let mut next = &s + &step;
        let floor = base - 1e-12 * base.abs();
        while loglik(&next) < floor && t > 1e-8 {
            t *= 0.5;
            next = &s + &step * t;
        }
        let mean = next.mean();
        s = next.map(|v| v - mean);
    }

    let (_, info) = grad_info(&s);
    let eig = SymmetricEigen::new(info);
    let tol = 1e-12 * eig.eigenvalues.amax().max(1.0);
    let inv = eig.eigenvalues.map(|l| if l > tol { 1.0 / l } else { 0.0 });
    let cov = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();

    let mut vals: Vec<f64> = s.iter().copied().collect();
    let partial: f64 = vals[..n - 1].iter().sum();
    vals[n - 1] = -partial;
    let scores = (0..n)
        .map(|i| {
            let half = if identifiable {
                1.96 * cov[(i, i)].max(0.0).sqrt()
            } else {
                f64::INFINITY
            };
            BtScore {
                item: names[i].clone(),
                score: vals[i],
                ci_low: vals[i] - half,
                ci_high: vals[i] + half,
            }
        })
        .collect();
    Ok(BtResult {
        scores,
        iterations,
        identifiable,
    })
}

/// What to render for evaluation.
pub enum EvalSource<'a> {
    Field {
        field: &'a SurfaceColorField,
        mesh: &'a Mesh,
        k: usize,
    },
    ColoredMesh(&'a Mesh),
}

pub fn eval_view_name(azimuth: f64) -> String {
    format!("view_{:03}.png", azimuth.round() as i64)
}

/// Renders the eight evaluation views at 45° steps with the given camera
/// intrinsics and writes `view_000.png` … `view_315.png`.
pub fn render_eval_views(
    source: &EvalSource<'_>,
    out_dir: &Path,
    radius: f64,
    fov_y: f64,
    resolution: usize,
) -> Result<Vec<(PathBuf, Image)>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    EVAL_AZIMUTHS
        .iter()
        .map(|&az| {
            let cam = Camera::new(az, 0.0, radius, fov_y, resolution)?;
            let img = match source {
                EvalSource::Field { field, mesh, k } => render_fused(field, mesh, &cam, *k)?,
                EvalSource::ColoredMesh(mesh) => render_color(mesh, &cam)?,
            };
            let path = out_dir.join(eval_view_name(az));
            save_rgb_png(&img, &path)?;
            Ok((path, img))
        })
        .collect()
}
