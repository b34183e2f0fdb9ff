//! Global identity controller: frozen stub encoder, direction/quality split,
//! norm-weighted reference aggregation with a degraded-image fallback, and
//! the per-block modulation deltas derived from the resulting anchor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numerics::{softmax, Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokens::GridDims;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const STUB_GRID: usize = 8;
const MIN_EMBEDDING_NORM: f64 = 1e-8;
const MIN_ANCHOR_NORM: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct RawIdentityEmbedding {
    pub z: Vec<f64>,
}

impl RawIdentityEmbedding {
    pub fn norm(&self) -> f64 {
        self.z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Frozen stand-in for a face-recognition encoder: a seeded Gaussian
/// projection of the mean-removed, block-averaged `8 x 8` image.
///
/// The map is linear, so scaling an image's contrast about its mean scales
/// the embedding norm by the same factor.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    seed: u64,
    id_dim: usize,
    channels: usize,
    /// `[id_dim, channels * 64]`
    projection: Tensor,
}

impl StubEncoder {
    pub fn new(seed: u64, id_dim: usize, channels: usize) -> Result<Self> {
        if id_dim == 0 || channels == 0 {
            return Err(Error::domain("stub_encoder", "id_dim and channels must be positive"));
        }
        let n_in = channels * STUB_GRID * STUB_GRID;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (n_in as f64).sqrt();
        let data = (0..id_dim * n_in)
            .map(|_| std * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
            .collect();
        Ok(Self {
            seed,
            id_dim,
            channels,
            projection: Tensor::matrix(id_dim, n_in, data)?,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id_dim(&self) -> usize {
        self.id_dim
    }

    fn features(&self, image: &Grid) -> Result<Vec<f64>> {
        let (c, h, w) = image.shape();
        if c != self.channels || h % STUB_GRID != 0 || w % STUB_GRID != 0 {
            return Err(Error::dim(
                "stub_encoder",
                format!("image {c}x{h}x{w}, need {} channels and sides divisible by {STUB_GRID}", self.channels),
            ));
        }
        let (by, bx) = (h / STUB_GRID, w / STUB_GRID);
        let inv = 1.0 / (by * bx) as f64;
        let mut feats = Vec::with_capacity(c * STUB_GRID * STUB_GRID);
        for ch in 0..c {
            for gy in 0..STUB_GRID {
                for gx in 0..STUB_GRID {
                    let mut s = 0.0;
                    for y in gy * by..(gy + 1) * by {
                        for x in gx * bx..(gx + 1) * bx {
                            s += image.get(ch, y, x);
                        }
                    }
                    feats.push(s * inv);
                }
            }
        }
        let mean = feats.iter().sum::<f64>() / feats.len() as f64;
        for f in &mut feats {
            *f -= mean;
        }
        Ok(feats)
    }

    pub fn encode(&self, image: &Grid) -> Result<RawIdentityEmbedding> {
        let f = self.features(image)?;
        let n = f.len();
        let z = (0..self.id_dim)
            .map(|i| {
                let row = &self.projection.data()[i * n..(i + 1) * n];
                row.iter().zip(&f).map(|(a, b)| a * b).sum()
            })
            .collect();
        Ok(RawIdentityEmbedding { z })
    }

    /// Affine map from flattened scene tokens of a latent to the embedding of
    /// the decoded image: `embedding = tokens.flatten() * matrix + offset`.
    pub fn latent_token_map(&self, image_hw: (usize, usize), patch: usize) -> Result<LatentEmbeddingMap> {
        let (h, w) = image_hw;
        let n_pix = self.channels * h * w;
        // column p of the image-space linear map is the encoding of basis image p
        let mut columns = Vec::with_capacity(n_pix);
        for p in 0..n_pix {
            let mut basis = Grid::zeros(self.channels, h, w);
            basis.data_mut()[p] = 1.0;
            columns.push(self.encode(&basis)?.z);
        }
        let lat_c = self.channels * codec::FOLD * codec::FOLD;
        let (lh, lw) = (h / codec::FOLD, w / codec::FOLD);
        if lh % patch != 0 || lw % patch != 0 {
            return Err(Error::dim("latent_token_map", "latent not divisible by patch"));
        }
        let dims = GridDims {
            rows: lh / patch,
            cols: lw / patch,
        };
        let token_dim = lat_c * patch * patch;
        let mut matrix = vec![0.0; dims.count() * token_dim * self.id_dim];
        let mut j = 0;
        for py in 0..dims.rows {
            for px in 0..dims.cols {
                for lc in 0..lat_c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let (c, y, x) = codec::source_pixel(lc, py * patch + dy, px * patch + dx);
                            let col = &columns[(c * h + y) * w + x];
                            for (k, &a) in col.iter().enumerate() {
                                matrix[j * self.id_dim + k] = 0.5 * a;
                            }
                            j += 1;
                        }
                    }
                }
            }
        }
        let mut offset = vec![0.0; self.id_dim];
        for col in &columns {
            for (o, a) in offset.iter_mut().zip(col) {
                *o += 0.5 * a;
            }
        }
        Ok(LatentEmbeddingMap {
            matrix: Tensor::matrix(dims.count() * token_dim, self.id_dim, matrix)?,
            offset: Tensor::row(offset),
        })
    }
}

/// See [`StubEncoder::latent_token_map`].
#[derive(Clone, Debug)]
pub struct LatentEmbeddingMap {
    pub matrix: Tensor,
    pub offset: Tensor,
}

impl LatentEmbeddingMap {
    /// Embedding of a `[n, token_dim]` token node as a `[1, id_dim]` node.
    pub fn apply(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let n = g.value(tokens).len();
        let flat = g.reshape(tokens, &[1, n])?;
        let m = g.leaf(self.matrix.clone())?;
        let b = g.leaf(self.offset.clone())?;
        let e = g.matmul(flat, m)?;
        g.add_row(e, b)
    }
}

/// Unit direction and norm of a raw embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEmbedding {
    pub direction: Vec<f64>,
    pub quality: f64,
}

pub fn split(z: &RawIdentityEmbedding) -> Result<SplitEmbedding> {
    let q = z.norm();
    if !(q > MIN_EMBEDDING_NORM) {
        return Err(Error::DegenerateEmbedding { norm: q });
    }
    Ok(SplitEmbedding {
        direction: z.z.iter().map(|v| v / q).collect(),
        quality: q,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    ReferenceAggregate,
    DegradedFallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityAnchor {
    pub direction: Vec<f64>,
    /// Per-reference weights in input order; empty for the fallback.
    pub weights: Vec<f64>,
    pub provenance: Provenance,
}

impl IdentityAnchor {
    pub fn direction_tensor(&self) -> Tensor {
        Tensor::row(self.direction.clone())
    }
}

fn lexicographic(a: &SplitEmbedding, b: &SplitEmbedding) -> std::cmp::Ordering {
    a.quality.total_cmp(&b.quality).then_with(|| {
        a.direction
            .iter()
            .zip(&b.direction)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// `w = softmax(log q / T)`, `direction = normalize(sum w_r e_r)`.
///
/// Sums run over a canonical ordering of the inputs so any permutation of
/// the references yields bit-identical results.
pub fn aggregate(embeddings: &[SplitEmbedding], temperature: f64) -> Result<IdentityAnchor> {
    if embeddings.is_empty() {
        return Err(Error::domain("aggregate", "no embeddings"));
    }
    if !(temperature > 0.0) {
        return Err(Error::domain("aggregate", format!("temperature {temperature} must be > 0")));
    }
    let dim = embeddings[0].direction.len();
    if embeddings.iter().any(|e| e.direction.len() != dim) {
        return Err(Error::dim("aggregate", "embedding dims differ"));
    }
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    order.sort_by(|&a, &b| lexicographic(&embeddings[a], &embeddings[b]));

    let logits: Vec<f64> = order.iter().map(|&i| embeddings[i].quality.ln() / temperature).collect();
    let sorted_w = softmax(&logits)?;
    let mut sum = vec![0.0; dim];
    for (&i, &w) in order.iter().zip(&sorted_w) {
        for (s, e) in sum.iter_mut().zip(&embeddings[i].direction) {
            *s += w * e;
        }
    }
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < MIN_ANCHOR_NORM {
        return Err(Error::DegenerateAnchor { norm });
    }
    let mut weights = vec![0.0; embeddings.len()];
    for (&i, &w) in order.iter().zip(&sorted_w) {
        weights[i] = w;
    }
    Ok(IdentityAnchor {
        direction: sum.iter().map(|v| v / norm).collect(),
        weights,
        provenance: Provenance::ReferenceAggregate,
    })
}

/// Reference aggregate when references exist, else the degraded image's own
/// normalised embedding. The fallback only conditions the forward pass.
pub fn select_anchor(
    refs: &[RawIdentityEmbedding],
    degraded: &Grid,
    encoder: &StubEncoder,
    temperature: f64,
) -> Result<IdentityAnchor> {
    if refs.is_empty() {
        let s = split(&encoder.encode(degraded)?)?;
        return Ok(IdentityAnchor {
            direction: s.direction,
            weights: Vec::new(),
            provenance: Provenance::DegradedFallback,
        });
    }
    let splits = refs.iter().map(split).collect::<Result<Vec<_>>>()?;
    aggregate(&splits, temperature)
}

/// Trainable projection from the anchor to per-block modulation deltas.
#[derive(Clone, Debug)]
pub struct IdentityParams {
    pub phi_in_w: ParamId,
    pub phi_in_b: ParamId,
    pub phi_out_w: ParamId,
    pub phi_out_b: ParamId,
    /// One zero-initialised `d -> 6d` head per block, double-stream blocks first.
    pub heads: Vec<(ParamId, ParamId)>,
}

pub const DELTAS_PER_BLOCK: usize = 6;

impl IdentityParams {
    pub fn init<R: rand::Rng>(
        store: &mut ParamStore,
        id_dim: usize,
        d_model: usize,
        n_blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let phi_in_w = store.normal("identity.phi.in.w", &[id_dim, d_model], 1.0 / (id_dim as f64).sqrt(), rng)?;
        let phi_in_b = store.zeros("identity.phi.in.b", &[1, d_model])?;
        let phi_out_w = store.normal("identity.phi.out.w", &[d_model, d_model], 1.0 / (d_model as f64).sqrt(), rng)?;
        let phi_out_b = store.zeros("identity.phi.out.b", &[1, d_model])?;
        let mut heads = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let w = store.zeros(format!("identity.psi.{b}.w"), &[d_model, DELTAS_PER_BLOCK * d_model])?;
            let bias = store.zeros(format!("identity.psi.{b}.b"), &[1, DELTAS_PER_BLOCK * d_model])?;
            heads.push((w, bias));
        }
        Ok(Self {
            phi_in_w,
            phi_in_b,
            phi_out_w,
            phi_out_b,
            heads,
        })
    }

    /// One `[1, 6d]` delta node per block.
    pub fn deltas(&self, g: &mut Graph, store: &ParamStore, direction: &Tensor) -> Result<Vec<Var>> {
        let e = g.leaf(direction.clone())?;
        let w1 = g.param(store, self.phi_in_w)?;
        let b1 = g.param(store, self.phi_in_b)?;
        let h = g.matmul(e, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h)?;
        let w2 = g.param(store, self.phi_out_w)?;
        let b2 = g.param(store, self.phi_out_b)?;
        let h = g.matmul(h, w2)?;
        let h_id = g.add_row(h, b2)?;
        self.heads
            .iter()
            .map(|&(w, b)| {
                let wv = g.param(store, w)?;
                let bv = g.param(store, b)?;
                let d = g.matmul(h_id, wv)?;
                g.add_row(d, bv)
            })
            .collect()
    }
}

/// Additive modulation offsets for one block: attention (scale, shift, gate)
/// followed by MLP (scale, shift, gate), each `d_model` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDeltas(pub Tensor);

impl BlockDeltas {
    pub fn part(&self, k: usize) -> Result<Tensor> {
        let d = self.0.cols() / DELTAS_PER_BLOCK;
        self.0.slice_cols(k * d, d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulationDeltas {
    pub double: Vec<BlockDeltas>,
    pub single: Vec<BlockDeltas>,
}

impl ModulationDeltas {
    pub fn all_zero(&self) -> bool {
        self.double
            .iter()
            .chain(&self.single)
            .all(|b| b.0.data().iter().all(|&v| v == 0.0))
    }
}

/// Evaluates the delta heads for an anchor outside any training graph.
pub fn modulation_deltas(
    anchor: &IdentityAnchor,
    store: &ParamStore,
    params: &IdentityParams,
    n_double: usize,
) -> Result<ModulationDeltas> {
    let mut g = Graph::new();
    let vars = params.deltas(&mut g, store, &anchor.direction_tensor())?;
    let blocks: Vec<BlockDeltas> = vars.iter().map(|&v| BlockDeltas(g.value(v).clone())).collect();
    let (double, single) = blocks.split_at(n_double.min(blocks.len()));
    Ok(ModulationDeltas {
        double: double.to_vec(),
        single: single.to_vec(),
    })
}
