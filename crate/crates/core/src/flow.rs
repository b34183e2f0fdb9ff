//! Flow-matching algebra: straight-line noising, clean-latent recovery,
//! training noise levels and the guided Euler sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{Grid, LatentGrid};

pub const DEFAULT_STEPS: usize = 12;
pub const DEFAULT_GUIDANCE: f64 = 4.0;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug, PartialEq)]
pub struct NoisedState {
    pub z_sigma: LatentGrid,
    /// Target flow `eps - z0`.
    pub u_star: LatentGrid,
    pub sigma: f64,
}

fn check_sigma(op: &'static str, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::domain(op, format!("sigma {sigma} outside [0, 1]")));
    }
    Ok(())
}

/// `z_sigma = (1 - sigma) z0 + sigma eps`, `u* = eps - z0`.
pub fn noise(z0: &LatentGrid, eps: &LatentGrid, sigma: f64) -> Result<NoisedState> {
    check_sigma("noise", sigma)?;
    if z0.shape() != eps.shape() {
        return Err(Error::dim("noise", format!("{:?} vs {:?}", z0.shape(), eps.shape())));
    }
    let z_sigma = Grid::new(
        z0.channels(),
        z0.height(),
        z0.width(),
        z0.data()
            .iter()
            .zip(eps.data())
            .map(|(&a, &e)| (1.0 - sigma) * a + sigma * e)
            .collect(),
    )?;
    let u_star = eps.sub(z0)?;
    Ok(NoisedState {
        z_sigma,
        u_star,
        sigma,
    })
}

/// `z0_hat = z_sigma - sigma * u_hat`.
pub fn recover(z_sigma: &LatentGrid, u_hat: &LatentGrid, sigma: f64) -> Result<LatentGrid> {
    z_sigma.axpy(-sigma, u_hat)
}

/// Training noise level, uniform on `[0, 1)`.
pub fn sample_sigma<R: Rng>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

pub fn standard_normal_grid<R: Rng>(rng: &mut R, channels: usize, height: usize, width: usize) -> LatentGrid {
    Grid::from_fn(channels, height, width, |_, _, _| rng.sample(StandardNormal))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            seed: DEFAULT_SEED,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::domain("sampler", "steps must be >= 1"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::domain("sampler", "guidance scale must be finite and >= 0"));
        }
        Ok(())
    }

    /// Uniform grid from 1 down to 0, both endpoints included.
    pub fn sigma_grid(&self) -> Vec<f64> {
        (0..=self.steps)
            .map(|k| (self.steps - k) as f64 / self.steps as f64)
            .collect()
    }
}

/// Which conditioning a prediction uses under guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    /// Identity modulation and degraded memory off; the degraded tokens stay.
    Unconditional,
}

/// A flow predictor with its conditioning already bound.
pub trait FlowModel {
    fn latent_shape(&self) -> (usize, usize, usize);
    fn predict(&self, z: &LatentGrid, sigma: f64, branch: Branch) -> Result<LatentGrid>;
}

/// Integrates from seeded Gaussian noise at sigma = 1 to sigma = 0.
pub fn integrate<M: FlowModel + ?Sized>(model: &M, cfg: &SamplerConfig) -> Result<LatentGrid> {
    let (c, h, w) = model.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = standard_normal_grid(&mut rng, c, h, w);
    integrate_from(model, start, cfg)
}

/// Explicit Euler from the given sigma = 1 state.
pub fn integrate_from<M: FlowModel + ?Sized>(model: &M, start: LatentGrid, cfg: &SamplerConfig) -> Result<LatentGrid> {
    cfg.validate()?;
    if start.shape() != model.latent_shape() {
        return Err(Error::dim(
            "integrate",
            format!("start {:?} vs model {:?}", start.shape(), model.latent_shape()),
        ));
    }
    let sigmas = cfg.sigma_grid();
    let g = cfg.guidance_scale;
    let mut z = start;
    for pair in sigmas.windows(2) {
        let (s, next) = (pair[0], pair[1]);
        let u = guided_flow(model, &z, s, g)?;
        z = z.axpy(next - s, &u)?;
    }
    Ok(z)
}

fn guided_flow<M: FlowModel + ?Sized>(model: &M, z: &LatentGrid, sigma: f64, g: f64) -> Result<LatentGrid> {
    if g == 1.0 {
        return model.predict(z, sigma, Branch::Conditional);
    }
    let uncond = model.predict(z, sigma, Branch::Unconditional)?;
    if g == 0.0 {
        return Ok(uncond);
    }
    let cond = model.predict(z, sigma, Branch::Conditional)?;
    uncond.axpy(g, &cond.sub(&uncond)?)
}
