//! Masked iterative generation over a pluggable denoiser.
//!
//! Each reverse step denoises the running latent, forward-diffuses the
//! encoded constraint to the same noise level and blends the two with the
//! latent mask: `(1 - M) * y_t + M * x_t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, Image, Mask, Zone, ZoneMap};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_REFINE_WEIGHT: f64 = 0.5;

/// Latent tensor stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        LatentGrid {
            width,
            height,
            channels,
            values: vec![0.0; width * height * channels],
        }
    }

    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "latent {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(
                "latent contains non-finite values".into(),
            ));
        }
        Ok(LatentGrid {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    fn same_shape(&self, other: &LatentGrid) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }
}

/// Per latent cell constraint weight in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMask {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl LatentMask {
    pub fn constant(width: usize, height: usize, w: f64) -> Self {
        LatentMask {
            width,
            height,
            weights: vec![w; width * height],
        }
    }
}

/// Downsamples a pixel mask to latent cells. With zones each pixel
/// contributes keep 1, refine `w_refine`, generate 0; without zones it
/// contributes `1 - mask`.
pub fn downsample_mask(
    mask: &Mask,
    zones: Option<&ZoneMap>,
    factor: usize,
    w_refine: f64,
) -> Result<LatentMask> {
    if factor == 0 || mask.width % factor != 0 || mask.height % factor != 0 {
        return Err(Error::Config(format!(
            "downsample factor {factor} does not divide {}x{}",
            mask.width, mask.height
        )));
    }
    if let Some(z) = zones {
        if !z.same_shape(mask) {
            return Err(Error::DimensionMismatch(
                "zone map and mask differ in size".into(),
            ));
        }
    }
    let (w, h) = (mask.width / factor, mask.height / factor);
    let area = (factor * factor) as f64;
    let mut weights = Vec::with_capacity(w * h);
    for cr in 0..h {
        for cc in 0..w {
            let mut sum = 0.0;
            for r in cr * factor..(cr + 1) * factor {
                for c in cc * factor..(cc + 1) * factor {
                    sum += match zones {
                        Some(z) => match z.get(r, c) {
                            Zone::Keep => 1.0,
                            Zone::Refine => w_refine,
                            Zone::Generate => 0.0,
                        },
                        None => {
                            if *mask.get(r, c) {
                                0.0
                            } else {
                                1.0
                            }
                        }
                    };
                }
            }
            weights.push(sum / area);
        }
    }
    Ok(LatentMask {
        width: w,
        height: h,
        weights,
    })
}

/// Cumulative signal/noise coefficients for t = 0..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
}

impl NoiseSchedule {
    /// signal² falls linearly from 1 to 0; noise² = 1 - signal².
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let frac = |t: usize| t as f64 / steps as f64;
        Ok(NoiseSchedule {
            signal: (0..=steps).map(|t| (1.0 - frac(t)).sqrt()).collect(),
            noise: (0..=steps).map(|t| frac(t).sqrt()).collect(),
        })
    }

    pub fn steps(&self) -> usize {
        self.signal.len() - 1
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS).expect("nonzero steps")
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `signal(t) * x0 + noise(t) * eps` with `eps` drawn from `(seed, t)`.
pub fn forward_diffuse(
    x0: &LatentGrid,
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LatentGrid> {
    if t > schedule.steps() {
        return Err(Error::Config(format!(
            "step {t} outside 0..={}",
            schedule.steps()
        )));
    }
    let (a, b) = (schedule.signal[t], schedule.noise[t]);
    let eps = gaussian(x0.values.len(), mix(seed, t as u64 + 1));
    Ok(LatentGrid {
        values: x0
            .values
            .iter()
            .zip(&eps)
            .map(|(x, e)| a * x + b * e)
            .collect(),
        ..*x0
    })
}

/// Conditioning handed to the denoiser at every step.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub depth: Option<&'a DepthMap>,
    pub prompt: &'a str,
    pub seed: u64,
}

/// A denoiser together with its latent codec.
pub trait DenoiserPlugin {
    /// Predicts `y_t` from the blended latent of step `t + 1`.
    fn step(
        &self,
        latent: &LatentGrid,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> std::result::Result<LatentGrid, String>;

    fn encode(&self, image: &Image) -> LatentGrid {
        identity_encode(image)
    }

    fn decode(&self, latent: &LatentGrid) -> Image {
        identity_decode(latent)
    }

    /// Pixel-to-latent downsample factor.
    fn factor(&self) -> usize {
        1
    }
}

pub fn identity_encode(image: &Image) -> LatentGrid {
    LatentGrid {
        width: image.width,
        height: image.height,
        channels: 3,
        values: image.data.iter().flat_map(|p| p.map(f64::from)).collect(),
    }
}

/// Clamps to [0, 1]; expects three channels.
pub fn identity_decode(latent: &LatentGrid) -> Image {
    let data = latent
        .values
        .chunks_exact(latent.channels)
        .map(|c| [0, 1, 2].map(|k| c.get(k).copied().unwrap_or(0.0).clamp(0.0, 1.0) as f32))
        .collect();
    Grid {
        width: latent.width,
        height: latent.height,
        data,
    }
}

/// Returns the target forward-diffused to the requested level, so the loop
/// converges to the target wherever it is unconstrained.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    target: LatentGrid,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(target: &Image, schedule: NoiseSchedule) -> Self {
        OracleDenoiser {
            target: identity_encode(target),
            schedule,
        }
    }
}

impl DenoiserPlugin for OracleDenoiser {
    fn step(
        &self,
        latent: &LatentGrid,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> std::result::Result<LatentGrid, String> {
        if !latent.same_shape(&self.target) {
            return Err("latent shape differs from target".into());
        }
        forward_diffuse(&self.target, t, &self.schedule, mix(cond.seed, 0x0AC1E))
            .map_err(|e| e.to_string())
    }
}

/// `step(v) = 0.5 v + 0.5 target`, cell-wise.
#[derive(Debug, Clone)]
pub struct ContractiveDenoiser {
    target: LatentGrid,
}

impl ContractiveDenoiser {
    pub fn new(target: LatentGrid) -> Self {
        ContractiveDenoiser { target }
    }
}

impl DenoiserPlugin for ContractiveDenoiser {
    fn step(
        &self,
        latent: &LatentGrid,
        _t: usize,
        _cond: &Conditioning<'_>,
    ) -> std::result::Result<LatentGrid, String> {
        if !latent.same_shape(&self.target) {
            return Err("latent shape differs from target".into());
        }
        Ok(LatentGrid {
            values: latent
                .values
                .iter()
                .zip(&self.target.values)
                .map(|(v, g)| 0.5 * v + 0.5 * g)
                .collect(),
            ..*latent
        })
    }
}

/// One reverse step as seen by an observer.
#[derive(Debug)]
pub struct StepTrace<'a> {
    pub t: usize,
    pub denoised: &'a LatentGrid,
    pub constraint: &'a LatentGrid,
    pub blended: &'a LatentGrid,
}

pub fn masked_generate(
    denoiser: &dyn DenoiserPlugin,
    constraint: &Image,
    mask: &LatentMask,
    cond: &Conditioning<'_>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Image> {
    masked_generate_traced(denoiser, constraint, mask, cond, schedule, seed, |_| {})
}

/// Runs the blend loop from pure noise down to step 0, calling `observe`
/// after every blend.
pub fn masked_generate_traced(
    denoiser: &dyn DenoiserPlugin,
    constraint: &Image,
    mask: &LatentMask,
    cond: &Conditioning<'_>,
    schedule: &NoiseSchedule,
    seed: u64,
    mut observe: impl FnMut(&StepTrace<'_>),
) -> Result<Image> {
    let x0 = denoiser.encode(constraint);
    if (x0.width, x0.height) != (mask.width, mask.height) {
        return Err(Error::DimensionMismatch(format!(
            "latent {}x{} vs mask {}x{}",
            x0.width, x0.height, mask.width, mask.height
        )));
    }
    if mask.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Config(
            "latent mask weights must lie in [0, 1]".into(),
        ));
    }
    let steps = schedule.steps();
    let ch = x0.channels;
    let mut current = LatentGrid {
        values: gaussian(x0.values.len(), mix(seed, 0)),
        ..x0
    };
    for t in (0..steps).rev() {
        let y = denoiser
            .step(&current, t, cond)
            .map_err(|msg| Error::Denoiser { step: t, msg })?;
        if !y.same_shape(&x0) || y.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Denoiser {
                step: t,
                msg: "denoiser returned a malformed latent".into(),
            });
        }
        let x = forward_diffuse(&x0, t, schedule, seed)?;
        let values = (0..x0.values.len())
            .map(|i| {
                let m = mask.weights[i / ch];
                (1.0 - m) * y.values[i] + m * x.values[i]
            })
            .collect();
        current = LatentGrid { values, ..x0 };
        observe(&StepTrace {
            t,
            denoised: &y,
            constraint: &x,
            blended: &current,
        });
    }
    Ok(denoiser.decode(&current))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond() -> Conditioning<'static> {
        Conditioning {
            depth: None,
            prompt: "",
            seed: 3,
        }
    }

    #[test]
    fn mask_downsampling() {
        let keep = Grid::filled(16, 16, false);
        assert!(downsample_mask(&keep, None, 4, 0.5)
            .unwrap()
            .weights
            .iter()
            .all(|w| *w == 1.0));

        let block = Grid::from_fn(32, 32, |r, c| (8..16).contains(&r) && (16..24).contains(&c));
        let m = downsample_mask(&block, None, 8, 0.5).unwrap();
        let zeros: Vec<usize> = (0..m.weights.len())
            .filter(|&i| m.weights[i] == 0.0)
            .collect();
        assert_eq!(zeros, vec![4 + 2]);
        assert!(m.weights.iter().all(|w| *w == 0.0 || *w == 1.0));

        let half = Grid::from_fn(2, 2, |_, c| c == 1);
        assert_eq!(
            downsample_mask(&half, None, 2, 0.5).unwrap().weights,
            vec![0.5]
        );
        let zones = Grid::from_fn(2, 2, |r, _| if r == 0 { Zone::Refine } else { Zone::Keep });
        assert_eq!(
            downsample_mask(&half, Some(&zones), 2, 0.5)
                .unwrap()
                .weights,
            vec![0.75]
        );
        assert!(downsample_mask(&keep, None, 3, 0.5).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::linear(50).unwrap();
        assert_eq!((s.signal[0], s.noise[0]), (1.0, 0.0));
        assert_eq!((s.signal[50], s.noise[50]), (0.0, 1.0));
        assert!(s.signal.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_diffusion() {
        let s = NoiseSchedule::default();
        let a = LatentGrid::new(10, 10, 3, (0..300).map(|i| i as f64 / 300.0).collect()).unwrap();
        assert_eq!(forward_diffuse(&a, 0, &s, 9).unwrap(), a);
        let b = LatentGrid::zeros(10, 10, 3);
        assert_eq!(
            forward_diffuse(&a, 50, &s, 9).unwrap(),
            forward_diffuse(&b, 50, &s, 9).unwrap()
        );
        assert!(forward_diffuse(&a, 51, &s, 9).is_err());
    }

    #[test]
    fn noise_variance() {
        let s = NoiseSchedule::default();
        let x0 =
            LatentGrid::new(100, 100, 1, (0..10_000).map(|i| (i % 7) as f64).collect()).unwrap();
        for t in [10, 25, 40] {
            let xt = forward_diffuse(&x0, t, &s, 11).unwrap();
            let r: Vec<f64> = xt
                .values
                .iter()
                .zip(&x0.values)
                .map(|(a, b)| a - s.signal[t] * b)
                .collect();
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r.len() - 1) as f64;
            let want = s.noise[t].powi(2);
            assert!((var - want).abs() <= 0.05 * want, "t={t}: {var} vs {want}");
        }
    }

    #[test]
    fn full_mask_reproduces_constraint() {
        let img = Grid::from_fn(8, 8, |r, c| [r as f32 / 7.0, c as f32 / 7.0, 0.25]);
        let target = Grid::filled(8, 8, [0.9f32, 0.1, 0.1]);
        let d = OracleDenoiser::new(&target, NoiseSchedule::default());
        let out = masked_generate(
            &d,
            &img,
            &LatentMask::constant(8, 8, 1.0),
            &cond(),
            &NoiseSchedule::default(),
            5,
        )
        .unwrap();
        assert_eq!(out, img);

        let free = masked_generate(
            &d,
            &img,
            &LatentMask::constant(8, 8, 0.0),
            &cond(),
            &NoiseSchedule::default(),
            5,
        )
        .unwrap();
        assert_eq!(free, target);
    }

    #[test]
    fn contractive_half_mask_matches_reference() {
        let (w, h) = (6, 4);
        let constraint = Grid::from_fn(w, h, |r, c| [0.1 * r as f32, 0.05 * c as f32, 0.5]);
        let target = LatentGrid::new(
            w,
            h,
            3,
            (0..w * h * 3)
                .map(|i| ((i * 37) % 11) as f64 / 11.0)
                .collect(),
        )
        .unwrap();
        let mask = LatentMask {
            width: w,
            height: h,
            weights: (0..w * h)
                .map(|i| if i % w < w / 2 { 1.0 } else { 0.0 })
                .collect(),
        };
        let s = NoiseSchedule::default();
        let den = ContractiveDenoiser::new(target.clone());
        let out = masked_generate(&den, &constraint, &mask, &cond(), &s, 21).unwrap();

        // reference recurrence
        let x0 = identity_encode(&constraint);
        let mut v = gaussian(x0.values.len(), mix(21, 0));
        for t in (0..50).rev() {
            let xt = forward_diffuse(&x0, t, &s, 21).unwrap();
            for i in 0..v.len() {
                let m = mask.weights[i / 3];
                let y = 0.5 * v[i] + 0.5 * target.values[i];
                v[i] = (1.0 - m) * y + m * xt.values[i];
            }
        }
        for i in 0..v.len() {
            let got = out.data[i / 3][i % 3] as f64;
            assert!((got - v[i].clamp(0.0, 1.0)).abs() < 1e-6);
            if mask.weights[i / 3] == 1.0 {
                assert_eq!(got as f32, constraint.data[i / 3][i % 3]);
            } else {
                assert!((got - target.values[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blend_is_affine_per_step() {
        let img = Grid::filled(4, 4, [0.3f32; 3]);
        let mask = LatentMask {
            width: 4,
            height: 4,
            weights: (0..16).map(|i| i as f64 / 15.0).collect(),
        };
        let den = ContractiveDenoiser::new(LatentGrid::zeros(4, 4, 3));
        let mut steps = 0;
        masked_generate_traced(
            &den,
            &img,
            &mask,
            &cond(),
            &NoiseSchedule::default(),
            1,
            |s| {
                steps += 1;
                for i in 0..s.blended.values.len() {
                    let m = mask.weights[i / 3];
                    let want = (1.0 - m) * s.denoised.values[i] + m * s.constraint.values[i];
                    assert_eq!(s.blended.values[i], want);
                }
            },
        )
        .unwrap();
        assert_eq!(steps, 50);
    }

    #[test]
    fn deterministic_and_errors() {
        let img = Grid::filled(4, 4, [0.3f32; 3]);
        let den = OracleDenoiser::new(&Grid::filled(4, 4, [0.6f32; 3]), NoiseSchedule::default());
        let m = LatentMask::constant(4, 4, 0.5);
        let s = NoiseSchedule::default();
        let a = masked_generate(&den, &img, &m, &cond(), &s, 8).unwrap();
        assert_eq!(a, masked_generate(&den, &img, &m, &cond(), &s, 8).unwrap());

        struct Failing;
        impl DenoiserPlugin for Failing {
            fn step(
                &self,
                _: &LatentGrid,
                t: usize,
                _: &Conditioning<'_>,
            ) -> std::result::Result<LatentGrid, String> {
                if t == 7 {
                    Err("boom".into())
                } else {
                    Ok(LatentGrid::zeros(4, 4, 3))
                }
            }
        }
        match masked_generate(&Failing, &img, &m, &cond(), &s, 8) {
            Err(Error::Denoiser { step: 7, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(
            masked_generate(&den, &img, &LatentMask::constant(2, 2, 1.0), &cond(), &s, 8).is_err()
        );
    }
}
