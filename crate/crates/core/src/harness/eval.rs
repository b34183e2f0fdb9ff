//! Restoration and corpus evaluation.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::synth::Corpus;
use crate::backbone::Model;
use crate::codec;
use crate::error::{Error, Result};
use crate::flow::{integrate, SamplerConfig};
use crate::grid::Grid;
use crate::parallel::{map_indexed, Execution};

/// PSNR reported for a pixel-exact restoration.
pub const PSNR_CAP: f64 = 100.0;

/// Restores one degraded image; the output is clamped to `[0, 1]`.
pub fn restore(model: &Model, degraded: &Grid, refs: &[Grid], sampler: &SamplerConfig) -> Result<Grid> {
    let size = model.config().image_size;
    for img in std::iter::once(degraded).chain(refs) {
        if (img.channels(), img.height(), img.width()) != (model.config().image_channels, size, size) {
            return Err(Error::Usage(format!(
                "image is {}x{}x{}, model expects {}x{size}x{size}",
                img.channels(),
                img.height(),
                img.width(),
                model.config().image_channels
            )));
        }
    }
    let prep = model.prepare(degraded, refs)?;
    let z = integrate(&model.conditioned(&prep), sampler)?;
    Ok(codec::decode(&z)?.clamp(0.0, 1.0))
}

pub fn psnr(a: &Grid, b: &Grid) -> Result<f64> {
    let d = a.sub(b)?;
    let mse = d.data().iter().map(|v| v * v).sum::<f64>() / d.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Cosine of the stub embeddings of two images; 0 when either is degenerate.
pub fn embedding_cosine(model: &Model, a: &Grid, b: &Grid) -> Result<f64> {
    let za = model.stub().encode(a)?;
    let zb = model.stub().encode(b)?;
    let (na, nb) = (za.norm(), zb.norm());
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    let dot: f64 = za.z.iter().zip(&zb.z).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    WithRef,
    NoRef,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "with-ref" => Ok(EvalMode::WithRef),
            "no-ref" => Ok(EvalMode::NoRef),
            _ => Err(format!("unknown mode {s:?} (with-ref or no-ref)")),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::WithRef => "with-ref",
            EvalMode::NoRef => "no-ref",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub identity_seed: u64,
    pub strength: u32,
    pub references_used: usize,
    /// Against the first reference of the item, whatever the mode.
    pub ref_cosine: f64,
    pub gt_cosine: f64,
    pub psnr: f64,
    /// Aggregation weights of the identity anchor; empty for the fallback.
    pub anchor_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub sampler: SamplerConfig,
    pub rows: Vec<EvalRow>,
    /// Items without references, skipped in with-ref mode.
    pub skipped: usize,
    /// Reference images handed to restoration; zero in no-ref mode.
    pub references_fed: usize,
    pub ref_cosine_mean: f64,
    pub gt_cosine_mean: f64,
    pub psnr_mean: f64,
}

/// Restores every corpus item and scores it. Item `i` is sampled with seed
/// `sampler.seed + i`, the same in both modes.
pub fn evaluate(model: &Model, corpus: &Corpus, mode: EvalMode, sampler: &SamplerConfig, exec: Execution) -> Result<EvalReport> {
    sampler.validate()?;
    let fed = AtomicUsize::new(0);
    let results = map_indexed(exec, corpus.items.len(), |k| -> Result<Option<EvalRow>> {
        let item = &corpus.items[k];
        let Some(first_ref) = item.references.first() else {
            return Ok(None);
        };
        let refs: &[Grid] = match mode {
            EvalMode::WithRef => &item.references,
            EvalMode::NoRef => &[],
        };
        fed.fetch_add(refs.len(), Ordering::Relaxed);
        let cfg = SamplerConfig {
            seed: sampler.seed.wrapping_add(item.index as u64),
            ..sampler.clone()
        };
        let restored = restore(model, &item.degraded, refs, &cfg)?;
        let anchor = model.prepare(&item.degraded, refs)?.anchor;
        Ok(Some(EvalRow {
            index: item.index,
            identity_seed: item.identity_seed,
            strength: item.strength,
            references_used: refs.len(),
            ref_cosine: embedding_cosine(model, &restored, first_ref)?,
            gt_cosine: embedding_cosine(model, &restored, &item.target)?,
            psnr: psnr(&restored, &item.target)?,
            anchor_weights: anchor.weights,
        }))
    });
    let mut rows = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(row) => rows.push(row),
            None => skipped += 1,
        }
    }
    if rows.is_empty() {
        return Err(Error::Corpus("no item has a reference to score against".into()));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        mode,
        sampler: sampler.clone(),
        ref_cosine_mean: mean(|r| r.ref_cosine),
        gt_cosine_mean: mean(|r| r.gt_cosine),
        psnr_mean: mean(|r| r.psnr),
        skipped,
        references_fed: fed.into_inner(),
        rows,
    })
}

impl EvalReport {
    /// Per-sample rows followed by one `mean` row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "kind",
            "index",
            "identity_seed",
            "strength",
            "mode",
            "references_used",
            "ref_cosine",
            "gt_cosine",
            "psnr",
            "anchor_weights",
            "steps",
            "guidance",
            "seed",
        ])?;
        let echo = [
            self.sampler.steps.to_string(),
            format!("{:?}", self.sampler.guidance_scale),
            self.sampler.seed.to_string(),
        ];
        for r in &self.rows {
            let weights = r.anchor_weights.iter().map(|w| format!("{w:?}")).collect::<Vec<_>>().join(";");
            let mut rec = vec![
                "sample".to_string(),
                r.index.to_string(),
                r.identity_seed.to_string(),
                r.strength.to_string(),
                self.mode.to_string(),
                r.references_used.to_string(),
                format!("{:?}", r.ref_cosine),
                format!("{:?}", r.gt_cosine),
                format!("{:?}", r.psnr),
                weights,
            ];
            rec.extend(echo.iter().cloned());
            w.write_record(&rec)?;
        }
        let mut rec = vec![
            "mean".to_string(),
            String::new(),
            String::new(),
            String::new(),
            self.mode.to_string(),
            self.references_fed.to_string(),
            format!("{:?}", self.ref_cosine_mean),
            format!("{:?}", self.gt_cosine_mean),
            format!("{:?}", self.psnr_mean),
            format!("skipped={}", self.skipped),
        ];
        rec.extend(echo.iter().cloned());
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }
}
