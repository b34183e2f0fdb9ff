//! Composite training loss.
//!
//! `L = alpha_fm * L_fm + lambda_id * omega(sigma) * ((1 - lh) * L_ref + lh * L_hard)`
//! with `lh = lambda_h * (1 - cos(e_ref, e_gt))` and
//! `omega(sigma) = max(1 - sigma, omega_min)^2`. The bracket is absent when
//! the sample has no references.

use crate::backbone::{Adapters, Model, Prepared};
use crate::error::{Error, Result};
use crate::flow::{self, NoisedState};
use crate::grid::{Grid, LatentGrid};
use crate::identity::{split, LatentEmbeddingMap, Provenance, StubEncoder};
use crate::numerics::{Graph, Tensor, Var};

pub const DEFAULT_ALPHA_FM: f64 = 0.75;
pub const DEFAULT_LAMBDA_ID: f64 = 0.30;
pub const DEFAULT_LAMBDA_H: f64 = 0.25;
pub const DEFAULT_OMEGA_MIN: f64 = 0.25;
const BREAKDOWN_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha_fm: f64,
    pub lambda_id: f64,
    pub lambda_h: f64,
    pub omega_min: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_fm: DEFAULT_ALPHA_FM,
            lambda_id: DEFAULT_LAMBDA_ID,
            lambda_h: DEFAULT_LAMBDA_H,
            omega_min: DEFAULT_OMEGA_MIN,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha_fm, self.lambda_id, self.lambda_h]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.omega_min > 0.0
            && self.omega_min <= 1.0;
        if !ok {
            return Err(Error::domain("loss_config", format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_fm: f64,
    pub l_ref_id: f64,
    pub l_hard: f64,
    pub omega: f64,
    pub lambda_h_star: f64,
    pub total: f64,
    /// False when the sample had no references; the identity terms are then
    /// reported as zero and do not enter `total`.
    pub has_references: bool,
}

impl LossBreakdown {
    pub fn recompose(&self, cfg: &LossConfig) -> f64 {
        let fm = cfg.alpha_fm * self.l_fm;
        if !self.has_references {
            return fm;
        }
        fm + cfg.lambda_id * self.omega * ((1.0 - self.lambda_h_star) * self.l_ref_id + self.lambda_h_star * self.l_hard)
    }

    pub fn check(&self, cfg: &LossConfig) -> Result<()> {
        let r = self.recompose(cfg);
        if (r - self.total).abs() > BREAKDOWN_TOLERANCE {
            return Err(Error::domain(
                "loss_breakdown",
                format!("total {} but terms recompose to {r}", self.total),
            ));
        }
        Ok(())
    }
}

/// Mean squared error over all elements; no sigma weighting.
pub fn flow_loss(u_hat: &LatentGrid, u_star: &LatentGrid) -> Result<f64> {
    let d = u_hat.sub(u_star)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.data().len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::DegenerateEmbedding { norm: na.min(nb) });
    }
    Ok((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 - cos(stub(decoded), target)`, in `[0, 2]`.
pub fn cosine_id_loss(stub: &StubEncoder, decoded: &Grid, target: &[f64]) -> Result<f64> {
    let z = stub.encode(decoded)?;
    if target.len() != z.z.len() {
        return Err(Error::dim("cosine_id_loss", format!("target {} vs embedding {}", target.len(), z.z.len())));
    }
    Ok(1.0 - cosine(&z.z, target)?)
}

/// `lambda_h * (1 - cos(e_ref, e_gt))`, in `[0, 2 lambda_h]`.
pub fn lambda_h_star(e_ref: &[f64], e_gt: &[f64], lambda_h: f64) -> f64 {
    let c: f64 = e_ref.iter().zip(e_gt).map(|(a, b)| a * b).sum();
    lambda_h * (1.0 - c.clamp(-1.0, 1.0))
}

/// `max(1 - sigma, omega_min)^2`.
pub fn omega(sigma: f64, omega_min: f64) -> f64 {
    let v = (1.0 - sigma).max(omega_min);
    v * v
}

/// Stop-gradient identity targets for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTargets {
    /// Unit anchor aggregated from the references.
    pub e_ref: Vec<f64>,
    /// Unit stub direction of the clean target.
    pub e_gt: Vec<f64>,
}

impl IdentityTargets {
    /// Targets for a prepared sample, or `None` when it has no references.
    /// A fallback anchor is never turned into a target.
    pub fn for_sample(prep: &Prepared, stub: &StubEncoder, clean: &Grid) -> Result<Option<Self>> {
        match prep.anchor.provenance {
            Provenance::DegradedFallback => Ok(None),
            Provenance::ReferenceAggregate => Ok(Some(Self {
                e_ref: prep.anchor.direction.clone(),
                e_gt: split(&stub.encode(clean)?)?.direction,
            })),
        }
    }
}

pub struct LossNodes {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Loss on the graph given the flow prediction node `u_hat` over scene
/// tokens. Identity terms use the embedding of the decoded clean estimate
/// `z_sigma - sigma * u_hat`.
pub fn loss_graph(
    g: &mut Graph,
    u_hat: Var,
    u_star: &Tensor,
    z_sigma: &Tensor,
    sigma: f64,
    targets: Option<&IdentityTargets>,
    map: &LatentEmbeddingMap,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let target = g.leaf(u_star.clone())?;
    let l_fm = g.mse(u_hat, target)?;
    let fm_term = g.scale(l_fm, cfg.alpha_fm)?;
    let l_fm_value = g.scalar_value(l_fm);
    let (total, breakdown) = match targets {
        None => {
            let total = fm_term;
            (
                total,
                LossBreakdown {
                    l_fm: l_fm_value,
                    l_ref_id: 0.0,
                    l_hard: 0.0,
                    omega: omega(sigma, cfg.omega_min),
                    lambda_h_star: 0.0,
                    total: g.scalar_value(total),
                    has_references: false,
                },
            )
        }
        Some(t) => {
            let zs = g.leaf(z_sigma.clone())?;
            let step = g.scale(u_hat, -sigma)?;
            let z0 = g.add(zs, step)?;
            let emb = map.apply(g, z0)?;
            let cos_ref = g.cosine(emb, &Tensor::row(t.e_ref.clone()))?;
            let cos_gt = g.cosine(emb, &Tensor::row(t.e_gt.clone()))?;
            let l_ref = g.scale(cos_ref, -1.0)?;
            let l_ref = g.add_const(l_ref, 1.0)?;
            let l_hard = g.scale(cos_gt, -1.0)?;
            let l_hard = g.add_const(l_hard, 1.0)?;
            let lh = lambda_h_star(&t.e_ref, &t.e_gt, cfg.lambda_h);
            let w = omega(sigma, cfg.omega_min);
            let a = g.scale(l_ref, cfg.lambda_id * w * (1.0 - lh))?;
            let b = g.scale(l_hard, cfg.lambda_id * w * lh)?;
            let bracket = g.add(a, b)?;
            let total = g.add(fm_term, bracket)?;
            (
                total,
                LossBreakdown {
                    l_fm: l_fm_value,
                    l_ref_id: g.scalar_value(l_ref),
                    l_hard: g.scalar_value(l_hard),
                    omega: w,
                    lambda_h_star: lh,
                    total: g.scalar_value(total),
                    has_references: true,
                },
            )
        }
    };
    breakdown.check(cfg)?;
    Ok(LossNodes { total, breakdown })
}

/// Loss of a given prediction, without model gradients.
pub fn total_loss(
    u_hat: &LatentGrid,
    state: &NoisedState,
    targets: Option<&IdentityTargets>,
    model: &Model,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let u = g.leaf(model.latent_to_tokens(u_hat)?)?;
    let nodes = loss_graph(
        &mut g,
        u,
        &model.latent_to_tokens(&state.u_star)?,
        &model.latent_to_tokens(&state.z_sigma)?,
        state.sigma,
        targets,
        model.embedding_map(),
        cfg,
    )?;
    Ok(nodes.breakdown)
}

/// One training sample's loss graph through the full model.
pub struct SampleInputs<'a> {
    pub clean: &'a Grid,
    pub prepared: &'a Prepared,
    pub eps: &'a LatentGrid,
    pub sigma: f64,
}

pub fn sample_loss(model: &Model, inputs: &SampleInputs<'_>, cfg: &LossConfig) -> Result<(Graph, LossNodes)> {
    let z0 = crate::codec::encode(inputs.clean)?;
    let state = flow::noise(&z0, inputs.eps, inputs.sigma)?;
    let targets = IdentityTargets::for_sample(inputs.prepared, model.stub(), inputs.clean)?;
    let z_tokens = model.latent_to_tokens(&state.z_sigma)?;
    let mut g = Graph::new();
    let z = g.leaf(z_tokens.clone())?;
    let out = model.flow_graph(&mut g, inputs.prepared, z, inputs.sigma, Adapters::ALL)?;
    let nodes = loss_graph(
        &mut g,
        out.flow,
        &model.latent_to_tokens(&state.u_star)?,
        &z_tokens,
        inputs.sigma,
        targets.as_ref(),
        model.embedding_map(),
        cfg,
    )?;
    Ok((g, nodes))
}
