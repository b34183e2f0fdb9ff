//! Seeded synthetic degradation: blur, noise, value quantization, area
//! downsample, bilinear upsample back, clamp.
//!
//! Noise and quantization act at full resolution, before the area average.
//! Applied after the downsample, noise on a 2x2 image comes back as large
//! smooth blobs that carry more contrast than the blurred signal. In this
//! order the heaviest strengths lower the stub embedding norm instead of
//! raising it, and the noise dithers the quantizer so the low-resolution
//! image does not collapse to one level.
//!
//! Strength `s` in `0..=16` drives every operator monotonically:
//!
//! | operator   | parameter at strength `s`                         |
//! |------------|---------------------------------------------------|
//! | blur       | Gaussian sigma `0.1 + 0.2 s`                      |
//! | downsample | factor `1 + (scale - 1) s / 16`, scale in `4..=10` |
//! | noise      | Gaussian sigma `0.01 s`                           |
//! | quantize   | `max(2, round(256 / (1 + s)))` levels             |
//!
//! Strength 0 returns the input unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const MAX_STRENGTH: u32 = 16;
pub const MIN_SCALE: u32 = 4;
pub const MAX_SCALE: u32 = 10;
/// Seed of evaluation item `i` is `EVAL_SEED_BASE + i`.
pub const EVAL_SEED_BASE: u64 = 42;

/// Strength ranges and their draw probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct StrengthBuckets {
    pub ranges: [(u32, u32); 3],
    pub probs: [f64; 3],
}

impl Default for StrengthBuckets {
    fn default() -> Self {
        Self {
            ranges: [(0, 3), (4, 8), (9, 16)],
            probs: [0.5, 0.3, 0.2],
        }
    }
}

impl StrengthBuckets {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.probs.iter().sum();
        if self.probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain("strength_buckets", format!("probabilities {:?}", self.probs)));
        }
        if self.ranges.iter().any(|&(lo, hi)| lo > hi || hi > MAX_STRENGTH) {
            return Err(Error::domain("strength_buckets", format!("ranges {:?}", self.ranges)));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut bucket = self.ranges.len() - 1;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                bucket = i;
                break;
            }
        }
        let (lo, hi) = self.ranges[bucket];
        rng.random_range(lo..=hi)
    }
}

/// Draws a strength with the default buckets.
pub fn sample_strength<R: Rng>(rng: &mut R) -> u32 {
    StrengthBuckets::default().sample(rng)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DegradationOp {
    GaussianBlur { sigma: f64 },
    Downsample { height: usize, width: usize },
    GaussianNoise { sigma: f64 },
    ValueQuantize { levels: u32 },
    Upsample { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub strength: u32,
    pub scale: u32,
    pub seed: u64,
    pub chain: Vec<DegradationOp>,
}

fn check_strength(strength: u32) -> Result<()> {
    if strength > MAX_STRENGTH {
        return Err(Error::domain("degrade", format!("strength {strength} > {MAX_STRENGTH}")));
    }
    Ok(())
}

impl DegradationSpec {
    /// Operator chain for an image of the given size.
    pub fn plan(strength: u32, seed: u64, height: usize, width: usize) -> Result<Self> {
        check_strength(strength)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = rng.random_range(MIN_SCALE..=MAX_SCALE);
        if strength == 0 {
            return Ok(Self {
                strength,
                scale,
                seed,
                chain: Vec::new(),
            });
        }
        let s = strength as f64;
        let factor = 1.0 + (scale as f64 - 1.0) * s / MAX_STRENGTH as f64;
        let small = |n: usize| ((n as f64 / factor).round() as usize).max(1);
        let chain = vec![
            DegradationOp::GaussianBlur { sigma: 0.1 + 0.2 * s },
            DegradationOp::GaussianNoise { sigma: 0.01 * s },
            DegradationOp::ValueQuantize {
                levels: ((256.0 / (1.0 + s)).round() as u32).max(2),
            },
            DegradationOp::Downsample {
                height: small(height),
                width: small(width),
            },
            DegradationOp::Upsample { height, width },
        ];
        Ok(Self {
            strength,
            scale,
            seed,
            chain,
        })
    }

    pub fn apply(&self, image: &Grid) -> Result<Grid> {
        if self.chain.is_empty() {
            return Ok(image.clone());
        }
        // the noise stream is separate from the draw that picked the scale
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let mut x = image.clone();
        for op in &self.chain {
            x = match *op {
                DegradationOp::GaussianBlur { sigma } => gaussian_blur(&x, sigma),
                DegradationOp::Downsample { height, width } => area_downsample(&x, height, width),
                DegradationOp::Upsample { height, width } => resample(&x, height, width),
                DegradationOp::GaussianNoise { sigma } => {
                    let data = x
                        .data()
                        .iter()
                        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Grid::new(x.channels(), x.height(), x.width(), data)?
                }
                DegradationOp::ValueQuantize { levels } => {
                    let q = (levels - 1) as f64;
                    x.map(|v| (v.clamp(0.0, 1.0) * q).round() / q)
                }
            };
        }
        Ok(x.clamp(0.0, 1.0))
    }
}

/// `degrade(image, strength, seed)`; the image is expected in `[0, 1]`.
pub fn degrade(image: &Grid, strength: u32, seed: u64) -> Result<Grid> {
    DegradationSpec::plan(strength, seed, image.height(), image.width())?.apply(image)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with replicate padding.
pub fn gaussian_blur(x: &Grid, sigma: f64) -> Grid {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (x.height() as i64, x.width() as i64);
    let horizontal = Grid::from_fn(x.channels(), x.height(), x.width(), |c, y, xx| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * x.get(c, y, (xx as i64 + i as i64 - r).clamp(0, w - 1) as usize))
            .sum()
    });
    Grid::from_fn(x.channels(), x.height(), x.width(), |c, y, xx| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * horizontal.get(c, (y as i64 + i as i64 - r).clamp(0, h - 1) as usize, xx))
            .sum()
    })
}

/// Box-filter reduction: each output pixel is the mean of the input area it
/// covers, with fractional overlaps weighted.
pub fn area_downsample(x: &Grid, height: usize, width: usize) -> Grid {
    let (fy, fx) = (x.height() as f64 / height as f64, x.width() as f64 / width as f64);
    let overlap = |lo: f64, hi: f64, p: usize| ((p + 1) as f64).min(hi) - (p as f64).max(lo);
    Grid::from_fn(x.channels(), height, width, |c, y, xx| {
        let (y0, y1) = (y as f64 * fy, (y + 1) as f64 * fy);
        let (x0, x1) = (xx as f64 * fx, (xx + 1) as f64 * fx);
        let (mut sum, mut weight) = (0.0, 0.0);
        for py in y0.floor() as usize..(y1.ceil() as usize).min(x.height()) {
            let wy = overlap(y0, y1, py);
            for px in x0.floor() as usize..(x1.ceil() as usize).min(x.width()) {
                let w = wy * overlap(x0, x1, px);
                if w > 0.0 {
                    sum += w * x.get(c, py, px);
                    weight += w;
                }
            }
        }
        sum / weight
    })
}

/// Bilinear resampling with pixel-center alignment.
pub fn resample(x: &Grid, height: usize, width: usize) -> Grid {
    if (height, width) == (x.height(), x.width()) {
        return x.clone();
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    Grid::from_fn(x.channels(), height, width, |c, y, xx| {
        let (y0, y1, fy) = coord(y, height, x.height());
        let (x0, x1, fx) = coord(xx, width, x.width());
        let top = x.get(c, y0, x0) * (1.0 - fx) + x.get(c, y0, x1) * fx;
        let bottom = x.get(c, y1, x0) * (1.0 - fx) + x.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
