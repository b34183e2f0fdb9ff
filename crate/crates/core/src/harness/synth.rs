//! Synthetic identities and evaluation corpora.
//!
//! An identity is a set of 4-6 Gaussian blobs on a mid-gray canvas. A render
//! applies a nuisance draw (sub-pixel shift, brightness offset, small
//! rotation) to the same blobs, so renders of one identity share structure
//! while renders of different identities do not.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image_io::{quantize_8bit, read_image, write_image};
use crate::degrade::{degrade, sample_strength, EVAL_SEED_BASE};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::tokens::MAX_REFERENCES;

pub const IMAGE_SIZE: usize = 16;
const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentity {
    pub seed: u64,
    pub blobs: Vec<Blob>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    pub shift: (f64, f64),
    pub brightness: f64,
    /// Radians.
    pub rotation: f64,
}

impl Nuisance {
    pub const NONE: Nuisance = Nuisance {
        shift: (0.0, 0.0),
        brightness: 0.0,
        rotation: 0.0,
    };

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            shift: (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
            brightness: rng.random_range(-0.08..=0.08),
            rotation: rng.random_range(-0.14..=0.14),
        }
    }

    /// Nuisance of render `slot` of an identity.
    pub fn for_slot(identity_seed: u64, slot: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
        rng.set_stream(slot + 1);
        Self::sample(&mut rng)
    }
}

impl SyntheticIdentity {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..=6);
        let c = IMAGE_SIZE as f64;
        let blobs = (0..n)
            .map(|_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Blob {
                    cx: rng.random_range(0.2 * c..0.8 * c),
                    cy: rng.random_range(0.2 * c..0.8 * c),
                    radius: rng.random_range(1.2..3.0),
                    amplitude: sign * rng.random_range(0.25..0.45),
                }
            })
            .collect();
        Self { seed, blobs }
    }

    pub fn render(&self, nuisance: &Nuisance) -> Grid {
        let mid = (IMAGE_SIZE as f64 - 1.0) / 2.0;
        let (s, c) = nuisance.rotation.sin_cos();
        Grid::from_fn(1, IMAGE_SIZE, IMAGE_SIZE, |_, y, x| {
            // inverse-map the pixel into the identity's canonical frame
            let px = x as f64 - nuisance.shift.0 - mid;
            let py = y as f64 - nuisance.shift.1 - mid;
            let u = c * px + s * py + mid;
            let v = -s * px + c * py + mid;
            let mut value = 0.5 + nuisance.brightness;
            for b in &self.blobs {
                let d2 = (u - b.cx).powi(2) + (v - b.cy).powi(2);
                value += b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp();
            }
            value.clamp(0.0, 1.0)
        })
    }

    pub fn render_slot(&self, slot: u64) -> Grid {
        self.render(&Nuisance::for_slot(self.seed, slot))
    }
}

/// Identity seed of corpus item `index`; distinct for distinct indices.
pub fn identity_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub index: usize,
    pub identity_seed: u64,
    pub strength: u32,
    pub degrade_seed: u64,
    pub target: Grid,
    pub degraded: Grid,
    pub references: Vec<Grid>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

/// Deterministic corpus. Item `i` uses render slot 0 for the target, slots
/// `1..=refs` for references and degradation seed `42 + i`; its strength is
/// `strength` if given, otherwise drawn from the training buckets.
pub fn make_dataset(n: usize, refs: usize, seed: u64, strength: Option<u32>) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Usage("corpus needs at least one identity".into()));
    }
    if refs > MAX_REFERENCES {
        return Err(Error::Usage(format!("at most {MAX_REFERENCES} references per identity")));
    }
    let mut strength_rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let id = SyntheticIdentity::new(identity_seed(seed, i));
            let s = strength.unwrap_or_else(|| sample_strength(&mut strength_rng));
            let degrade_seed = EVAL_SEED_BASE + i as u64;
            let target = quantize_8bit(&id.render_slot(0));
            let degraded = quantize_8bit(&degrade(&target, s, degrade_seed)?);
            let references = (1..=refs as u64).map(|r| quantize_8bit(&id.render_slot(r))).collect();
            Ok(CorpusItem {
                index: i,
                identity_seed: id.seed,
                strength: s,
                degrade_seed,
                target,
                degraded,
                references,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { items })
}

fn target_name(i: usize) -> String {
    format!("target_{i:04}.png")
}

fn degraded_name(i: usize) -> String {
    format!("degraded_{i:04}.png")
}

fn reference_name(i: usize, r: usize) -> String {
    format!("ref_{i:04}_{r}.png")
}

impl Corpus {
    pub fn reference_count(&self) -> usize {
        self.items.iter().map(|i| i.references.len()).sum()
    }

    /// Writes PNG files plus `manifest.csv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
        w.write_record(["index", "identity_seed", "strength", "degrade_seed", "target", "degraded", "references"])?;
        for item in &self.items {
            let i = item.index;
            write_image(&item.target, dir.join(target_name(i)))?;
            write_image(&item.degraded, dir.join(degraded_name(i)))?;
            let mut refs = Vec::new();
            for (r, img) in item.references.iter().enumerate() {
                write_image(img, dir.join(reference_name(i, r)))?;
                refs.push(reference_name(i, r));
            }
            w.write_record([
                i.to_string(),
                item.identity_seed.to_string(),
                item.strength.to_string(),
                item.degrade_seed.to_string(),
                target_name(i),
                degraded_name(i),
                refs.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a corpus written by [`Corpus::save`]. Reference images are only
    /// opened when `with_references` is set; otherwise items come back with
    /// an empty reference list.
    pub fn load(dir: impl AsRef<Path>, with_references: bool) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST);
        let mut r = csv::Reader::from_path(&manifest)
            .map_err(|e| Error::Corpus(format!("{}: {e}", manifest.display())))?;
        let mut items = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 7 {
                return Err(Error::Corpus(format!("manifest row {}: expected 7 fields", line + 2)));
            }
            let num = |k: usize| -> Result<u64> {
                rec[k]
                    .parse()
                    .map_err(|e| Error::Corpus(format!("manifest row {} field {k}: {e}", line + 2)))
            };
            let references = if with_references && !rec[6].is_empty() {
                rec[6]
                    .split(';')
                    .map(|f| read_image(dir.join(f)))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            items.push(CorpusItem {
                index: num(0)? as usize,
                identity_seed: num(1)?,
                strength: num(2)? as u32,
                degrade_seed: num(3)?,
                target: read_image(dir.join(&rec[4]))?,
                degraded: read_image(dir.join(&rec[5]))?,
                references,
            });
        }
        if items.is_empty() {
            return Err(Error::Corpus(format!("{} lists no items", manifest.display())));
        }
        Ok(Self { items })
    }
}
