//! Training configuration and loop.
//!
//! Samples are generated online from a fixed pool of synthetic identities:
//! each one gets a random target render, a bucketed degradation, 0-3
//! distinct reference renders, a noise level and a noise draw. Per-sample
//! gradients are computed independently and summed in batch order.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::{identity_seed, SyntheticIdentity};
use crate::backbone::{Model, ModelConfig};
use crate::config::KeyValues;
use crate::degrade::{degrade, StrengthBuckets};
use crate::error::{Error, Result};
use crate::flow::{self, SamplerConfig};
use crate::numerics::Tensor;
use crate::objective::{sample_loss, LossBreakdown, LossConfig, SampleInputs};
use crate::parallel::{map_indexed, Execution};
use crate::tokens::MAX_REFERENCES;

/// Distinct render slots a training sample may draw from.
const RENDER_SLOTS: u64 = 64;

/// Probabilities of supplying 0, 1, 2 or 3 references.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceMix {
    pub probs: [f64; MAX_REFERENCES + 1],
}

impl Default for ReferenceMix {
    fn default() -> Self {
        Self {
            probs: [0.3, 0.3, 0.2, 0.2],
        }
    }
}

impl ReferenceMix {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.probs.iter().sum();
        if self.probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain("reference_mix", format!("{:?}", self.probs)));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        MAX_REFERENCES
    }
}

/// Draws a reference count with the default mix.
pub fn sample_reference_count<R: Rng>(rng: &mut R) -> usize {
    ReferenceMix::default().sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(format!("unknown optimizer {s:?} (sgd or adam)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub n_identities: usize,
    pub data_seed: u64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub reference_mix: ReferenceMix,
    pub strength_buckets: StrengthBuckets,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            loss: LossConfig::default(),
            seed: flow::DEFAULT_SEED,
            steps: 200,
            batch_size: 8,
            n_identities: 32,
            data_seed: 7,
            optimizer: Optimizer::Sgd,
            learning_rate: 0.05,
            momentum: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            reference_mix: ReferenceMix::default(),
            strength_buckets: StrengthBuckets::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

fn parse_list<const N: usize>(kv: &mut KeyValues, key: &str) -> Result<Option<[f64; N]>> {
    let Some((line, text)) = kv.take_raw(key) else {
        return Ok(None);
    };
    let values: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config {
            line,
            msg: format!("{key}: {e}"),
        })?;
    <[f64; N]>::try_from(values).map(Some).map_err(|v| Error::Config {
        line,
        msg: format!("{key}: expected {N} values, got {}", v.len()),
    })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = TrainConfig::default();
        c.model.take_from(&mut kv)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.take_into("steps", &mut c.steps)?;
        kv.take_into("batch_size", &mut c.batch_size)?;
        kv.take_into("n_identities", &mut c.n_identities)?;
        kv.take_into("data_seed", &mut c.data_seed)?;
        kv.take_into("optimizer", &mut c.optimizer)?;
        kv.take_into("learning_rate", &mut c.learning_rate)?;
        kv.take_into("momentum", &mut c.momentum)?;
        kv.take_into("adam_beta2", &mut c.adam_beta2)?;
        kv.take_into("adam_eps", &mut c.adam_eps)?;
        kv.take_into("grad_clip", &mut c.grad_clip)?;
        kv.take_into("alpha_fm", &mut c.loss.alpha_fm)?;
        kv.take_into("lambda_id", &mut c.loss.lambda_id)?;
        kv.take_into("lambda_h", &mut c.loss.lambda_h)?;
        kv.take_into("omega_min", &mut c.loss.omega_min)?;
        if let Some(p) = parse_list::<4>(&mut kv, "ref_mix")? {
            c.reference_mix.probs = p;
        }
        if let Some(p) = parse_list::<3>(&mut kv, "strength_buckets")? {
            c.strength_buckets.probs = p;
        }
        kv.take_into("sampler.steps", &mut c.sampler.steps)?;
        kv.take_into("sampler.guidance", &mut c.sampler.guidance_scale)?;
        kv.take_into("sampler.seed", &mut c.sampler.seed)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        let opt = match self.optimizer {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        };
        s += &format!(
            "seed = {}\nsteps = {}\nbatch_size = {}\nn_identities = {}\ndata_seed = {}\noptimizer = {opt}\n\
             learning_rate = {:?}\nmomentum = {:?}\nadam_beta2 = {:?}\nadam_eps = {:?}\ngrad_clip = {:?}\n\
             alpha_fm = {:?}\nlambda_id = {:?}\nlambda_h = {:?}\nomega_min = {:?}\nref_mix = {}\n\
             strength_buckets = {}\nsampler.steps = {}\nsampler.guidance = {:?}\nsampler.seed = {}\n",
            self.seed,
            self.steps,
            self.batch_size,
            self.n_identities,
            self.data_seed,
            self.learning_rate,
            self.momentum,
            self.adam_beta2,
            self.adam_eps,
            self.grad_clip,
            self.loss.alpha_fm,
            self.loss.lambda_id,
            self.loss.lambda_h,
            self.loss.omega_min,
            join(&self.reference_mix.probs),
            join(&self.strength_buckets.probs),
            self.sampler.steps,
            self.sampler.guidance_scale,
            self.sampler.seed,
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.reference_mix.validate()?;
        self.strength_buckets.validate()?;
        self.sampler.validate()?;
        let bad = |m: &str| Err(Error::domain("train_config", m.to_string()));
        if self.batch_size == 0 || self.n_identities == 0 {
            return bad("batch_size and n_identities must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("momentum and adam_beta2 must lie in [0, 1)");
        }
        if !(self.grad_clip >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("grad_clip must be >= 0 and adam_eps > 0");
        }
        Ok(())
    }
}

/// One drawn training sample.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub identity_seed: u64,
    pub clean: crate::grid::Grid,
    pub degraded: crate::grid::Grid,
    pub references: Vec<crate::grid::Grid>,
    pub strength: u32,
    pub sigma: f64,
    pub eps: crate::grid::LatentGrid,
}

/// Sample `index` of step `step`; depends only on the config and those two
/// numbers.
pub fn draw_sample(cfg: &TrainConfig, step: usize, index: usize) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((step * cfg.batch_size + index) as u64);
    let id_seed = identity_seed(cfg.data_seed, rng.random_range(0..cfg.n_identities));
    let identity = SyntheticIdentity::new(id_seed);
    let n_refs = cfg.reference_mix.sample(&mut rng);
    let mut slots: Vec<u64> = Vec::with_capacity(n_refs + 1);
    while slots.len() < n_refs + 1 {
        let s = rng.random_range(0..RENDER_SLOTS);
        if !slots.contains(&s) {
            slots.push(s);
        }
    }
    let clean = identity.render_slot(slots[0]);
    let references = slots[1..].iter().map(|&s| identity.render_slot(s)).collect();
    let strength = cfg.strength_buckets.sample(&mut rng);
    let degraded = degrade(&clean, strength, rng.random())?;
    let sigma = flow::sample_sigma(&mut rng);
    let (c, h, w) = cfg.model.latent_shape();
    let eps = flow::standard_normal_grid(&mut rng, c, h, w);
    Ok(TrainingSample {
        identity_seed: id_seed,
        clean,
        degraded,
        references,
        strength,
        sigma,
        eps,
    })
}

/// Loss breakdown of one sample without a backward pass.
pub fn sample_breakdown(model: &Model, sample: &TrainingSample, loss: &LossConfig) -> Result<LossBreakdown> {
    let prepared = model.prepare(&sample.degraded, &sample.references)?;
    let (_, nodes) = sample_loss(
        model,
        &SampleInputs {
            clean: &sample.clean,
            prepared: &prepared,
            eps: &sample.eps,
            sigma: sample.sigma,
        },
        loss,
    )?;
    Ok(nodes.breakdown)
}

/// Loss breakdown and parameter gradients of one sample.
pub fn sample_gradients(model: &Model, sample: &TrainingSample, loss: &LossConfig) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let prepared = model.prepare(&sample.degraded, &sample.references)?;
    let (g, nodes) = sample_loss(
        model,
        &SampleInputs {
            clean: &sample.clean,
            prepared: &prepared,
            eps: &sample.eps,
            sigma: sample.sigma,
        },
        loss,
    )?;
    let grads = g.backward(nodes.total)?.for_params(model.store());
    Ok((nodes.breakdown, grads))
}

/// Mean loss terms and gradients over a batch, reduced in sample order.
pub fn batch_gradients(
    model: &Model,
    samples: &[TrainingSample],
    loss: &LossConfig,
    exec: Execution,
) -> Result<(Vec<LossBreakdown>, Vec<Tensor>)> {
    let results = map_indexed(exec, samples.len(), |i| sample_gradients(model, &samples[i], loss));
    let mut breakdowns = Vec::with_capacity(samples.len());
    let mut total: Option<Vec<Tensor>> = None;
    for r in results {
        let (b, grads) = r?;
        breakdowns.push(b);
        total = Some(match total {
            None => grads,
            Some(mut acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g)?;
                }
                acc
            }
        });
    }
    let inv = 1.0 / samples.len() as f64;
    let mean = total
        .ok_or_else(|| Error::Usage("empty batch".into()))?
        .into_iter()
        .map(|g| g.scale(inv))
        .collect();
    Ok((breakdowns, mean))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub l_fm: f64,
    pub l_ref_id: f64,
    pub l_hard: f64,
    pub omega: f64,
    pub lambda_h_star: f64,
    pub total: f64,
    pub with_references: usize,
    pub grad_norm: f64,
}

impl StepLog {
    fn from_batch(step: usize, b: &[LossBreakdown], grad_norm: f64) -> Self {
        let n = b.len() as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| b.iter().map(f).sum::<f64>() / n;
        Self {
            step,
            l_fm: mean(|x| x.l_fm),
            l_ref_id: mean(|x| x.l_ref_id),
            l_hard: mean(|x| x.l_hard),
            omega: mean(|x| x.omega),
            lambda_h_star: mean(|x| x.lambda_h_star),
            total: mean(|x| x.total),
            with_references: b.iter().filter(|x| x.has_references).count(),
            grad_norm,
        }
    }
}

pub fn write_loss_log(log: &[StepLog], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "l_fm",
        "l_ref_id",
        "l_hard",
        "omega",
        "lambda_h_star",
        "total",
        "with_references",
        "grad_norm",
    ])?;
    for s in log {
        w.write_record([
            s.step.to_string(),
            format!("{:?}", s.l_fm),
            format!("{:?}", s.l_ref_id),
            format!("{:?}", s.l_hard),
            format!("{:?}", s.omega),
            format!("{:?}", s.lambda_h_star),
            format!("{:?}", s.total),
            s.with_references.to_string(),
            format!("{:?}", s.grad_norm),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

enum OptimizerState {
    Sgd { velocity: Vec<Tensor> },
    Adam { m: Vec<Tensor>, v: Vec<Tensor>, t: i32 },
}

impl OptimizerState {
    fn new(kind: Optimizer, model: &Model) -> Self {
        let zeros = || model.store().ids().map(|id| Tensor::zeros(model.store().get(id).shape())).collect();
        match kind {
            Optimizer::Sgd => OptimizerState::Sgd { velocity: zeros() },
            Optimizer::Adam => OptimizerState::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    fn step(&mut self, cfg: &TrainConfig, model: &mut Model, grads: &[Tensor]) -> Result<()> {
        let ids: Vec<_> = model.store().ids().collect();
        match self {
            OptimizerState::Sgd { velocity } => {
                for ((id, g), v) in ids.into_iter().zip(grads).zip(velocity.iter_mut()) {
                    *v = v.scale(cfg.momentum).add(g)?;
                    let p = model.store().get(id).sub(&v.scale(cfg.learning_rate))?;
                    model.store_mut().set(id, p)?;
                }
            }
            OptimizerState::Adam { m, v, t } => {
                *t += 1;
                let b1 = cfg.momentum;
                let b2 = cfg.adam_beta2;
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                for (((id, g), mi), vi) in ids.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = mi.scale(b1).add(&g.scale(1.0 - b1))?;
                    *vi = vi.scale(b2).add(&g.map(|x| x * x).scale(1.0 - b2))?;
                    let upd: Vec<f64> = mi
                        .data()
                        .iter()
                        .zip(vi.data())
                        .map(|(a, b)| cfg.learning_rate * (a / c1) / ((b / c2).sqrt() + cfg.adam_eps))
                        .collect();
                    let cur = model.store().get(id);
                    let p = Tensor::new(
                        cur.shape().to_vec(),
                        cur.data().iter().zip(&upd).map(|(p, u)| p - u).collect(),
                    )?;
                    model.store_mut().set(id, p)?;
                }
            }
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
}

/// Runs `cfg.steps` optimizer steps from a fresh model.
pub fn train(cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_from(Model::new(cfg.model.clone())?, cfg, exec)
}

pub fn train_from(mut model: Model, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    let mut opt = OptimizerState::new(cfg.optimizer, &model);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let samples = (0..cfg.batch_size)
            .map(|i| draw_sample(cfg, step, i))
            .collect::<Result<Vec<_>>>()?;
        let (breakdowns, mut grads) = batch_gradients(&model, &samples, &cfg.loss, exec).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let entry = StepLog::from_batch(step, &breakdowns, norm);
        if !entry.total.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {} gradient norm {norm}", entry.total),
            });
        }
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grads = grads.into_iter().map(|g| g.scale(s)).collect();
        }
        opt.step(cfg, &mut model, &grads)?;
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}
