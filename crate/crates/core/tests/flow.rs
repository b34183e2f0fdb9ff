//! Flow algebra and the guided Euler sampler.

use std::time::Instant;

use flowface::flow::{integrate, integrate_from, noise, recover, standard_normal_grid, Branch, FlowModel, SamplerConfig};
use flowface::grid::{Grid, LatentGrid};
use flowface::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn recovery_over_a_thousand_draws() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let z0 = standard_normal_grid(&mut rng, 4, 8, 8);
        let eps = standard_normal_grid(&mut rng, 4, 8, 8);
        let sigma = rng.random::<f64>();
        let st = noise(&z0, &eps, sigma).unwrap();
        let back = recover(&st.z_sigma, &st.u_star, sigma).unwrap();
        worst = worst.max(back.max_abs_diff(&z0));
    }
    assert!(worst < 1e-6, "max error {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 1.0, "took {:?}", start.elapsed());
}

/// `u = a z + c`, with a different offset per branch.
struct Affine {
    a: f64,
    cond: f64,
    uncond: f64,
    calls: std::cell::Cell<(usize, usize)>,
}

impl Affine {
    fn new(a: f64, cond: f64, uncond: f64) -> Self {
        Self {
            a,
            cond,
            uncond,
            calls: std::cell::Cell::new((0, 0)),
        }
    }
}

impl FlowModel for Affine {
    fn latent_shape(&self) -> (usize, usize, usize) {
        (2, 3, 3)
    }

    fn predict(&self, z: &LatentGrid, _sigma: f64, branch: Branch) -> Result<LatentGrid> {
        let (c, u) = self.calls.get();
        let offset = match branch {
            Branch::Conditional => {
                self.calls.set((c + 1, u));
                self.cond
            }
            Branch::Unconditional => {
                self.calls.set((c, u + 1));
                self.uncond
            }
        };
        Ok(z.map(|v| self.a * v + offset))
    }
}

fn sampler(steps: usize, g: f64) -> SamplerConfig {
    SamplerConfig {
        steps,
        guidance_scale: g,
        seed: 3,
    }
}

#[test]
fn constant_field_is_integrated_exactly() {
    let m = Affine::new(0.0, 0.25, -1.0);
    let start = Grid::filled(2, 3, 3, 1.0);
    let out = integrate_from(&m, start, &sampler(7, 1.0)).unwrap();
    assert!(out.data().iter().all(|v| (v - 0.75).abs() < 1e-12));
}

#[test]
fn guidance_one_uses_only_the_conditional_branch() {
    let m = Affine::new(0.3, 0.5, -0.5);
    let out = integrate(&m, &sampler(5, 1.0)).unwrap();
    assert_eq!(m.calls.get(), (5, 0));
    let cond_only = Affine::new(0.3, 0.5, 0.5);
    assert_eq!(integrate(&cond_only, &sampler(5, 3.0)).unwrap(), out);
}

#[test]
fn guidance_zero_uses_only_the_unconditional_branch() {
    let m = Affine::new(0.3, 0.5, -0.5);
    let out = integrate(&m, &sampler(5, 0.0)).unwrap();
    assert_eq!(m.calls.get(), (0, 5));
    let uncond_only = Affine::new(0.3, -0.5, -0.5);
    assert_eq!(integrate(&uncond_only, &sampler(5, 1.0)).unwrap(), out);
}

#[test]
fn one_step_output_is_affine_in_guidance() {
    let m = Affine::new(-0.4, 0.2, -0.7);
    let at = |g: f64| integrate(&m, &sampler(1, g)).unwrap();
    let (z0, z1, z4) = (at(0.0), at(1.0), at(4.0));
    let predicted = z0.axpy(4.0, &z1.sub(&z0).unwrap()).unwrap();
    assert!(z4.max_abs_diff(&predicted) < 1e-12);
    // guided offset -0.7 + 4 * 0.9 = 2.9 shifts every entry by -2.9
    let start = standard_normal_grid(&mut ChaCha8Rng::seed_from_u64(3), 2, 3, 3);
    let expected = start.map(|v| v - (-0.4 * v + 2.9));
    assert!(z4.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn integrate_is_seeded() {
    let m = Affine::new(0.1, 0.0, 0.0);
    assert_eq!(integrate(&m, &sampler(4, 4.0)).unwrap(), integrate(&m, &sampler(4, 4.0)).unwrap());
    assert_ne!(
        integrate(&m, &sampler(4, 4.0)).unwrap(),
        integrate(&m, &SamplerConfig { seed: 4, ..sampler(4, 4.0) }).unwrap()
    );
}

#[test]
fn sampler_rejects_bad_settings() {
    let m = Affine::new(0.1, 0.0, 0.0);
    assert!(integrate(&m, &sampler(0, 1.0)).is_err());
    assert!(integrate(&m, &sampler(2, -1.0)).is_err());
    assert!(integrate(&m, &sampler(2, f64::NAN)).is_err());
    assert!(integrate_from(&m, Grid::zeros(1, 3, 3), &sampler(2, 1.0)).is_err());
}

proptest! {
    #[test]
    fn noised_state_lies_on_the_segment(seed in 0u64..1000, sigma in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = standard_normal_grid(&mut rng, 1, 2, 2);
        let eps = standard_normal_grid(&mut rng, 1, 2, 2);
        let st = noise(&z0, &eps, sigma).unwrap();
        // z_sigma = z0 + sigma u*
        prop_assert!(st.z_sigma.max_abs_diff(&z0.axpy(sigma, &st.u_star).unwrap()) < 1e-12);
    }
}
