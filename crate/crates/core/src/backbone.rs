//! Toy restoration transformer with identity-modulation and degraded-memory
//! hooks.
//!
//! Layout of one forward pass:
//!
//! 1. image tokens (scene, degraded, references) go through a shared input
//!    projection; the scene tokens also receive the low-rank degraded residual
//! 2. a learned text token is prepended and the sequence runs through
//!    double-stream blocks (separate text/image weights, joint attention) and
//!    then single-stream blocks (shared weights)
//! 3. every block is modulated by a sigma-conditioned (scale, shift, gate)
//!    triple per sub-layer; identity deltas are added for image rows only
//! 4. after self-attention, image rows read the degraded memory through a
//!    gated cross-attention
//!
//! Text rows attend to text keys only, so nothing on the image side can reach
//! the text stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::error::{Error, Result};
use crate::flow::{Branch, FlowModel};
use crate::grid::{Grid, LatentGrid};
use crate::identity::{
    select_anchor, IdentityAnchor, IdentityParams, LatentEmbeddingMap, ModulationDeltas, StubEncoder,
    DEFAULT_TEMPERATURE, DELTAS_PER_BLOCK,
};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::structure::{
    detail_input, resize_to_scene, DegradedMemory, StructureParams, StructureShape, DEFAULT_DEGRADED_STRENGTH,
};
use crate::tokens::{patchify, unpatchify, GridDims, RopeConfig, Segment, SequenceLayout, TokenSequence, MAX_REFERENCES};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_double: usize,
    pub n_single: usize,
    pub mlp_ratio: usize,
    pub rope: RopeConfig,
    pub memory_budget: usize,
    pub rank: usize,
    pub degraded_strength: f64,
    pub id_dim: usize,
    pub temperature: f64,
    pub sigma_embed_dim: usize,
    pub n_text: usize,
    pub stub_seed: u64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 16x16 grayscale images, 4x8x8 latents, 16 scene
    /// tokens, width 64 split over four 16-wide heads.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            image_channels: 1,
            patch: 2,
            d_model: 64,
            n_heads: 4,
            n_double: 2,
            n_single: 2,
            mlp_ratio: 4,
            rope: RopeConfig::toy(),
            memory_budget: 8,
            rank: 4,
            degraded_strength: DEFAULT_DEGRADED_STRENGTH,
            id_dim: 32,
            temperature: DEFAULT_TEMPERATURE,
            sigma_embed_dim: 32,
            n_text: 1,
            stub_seed: 7,
            init_seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.rope.head_dim()
    }

    pub fn latent_channels(&self) -> usize {
        self.image_channels * codec::FOLD * codec::FOLD
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / codec::FOLD
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_channels(), self.latent_side(), self.latent_side())
    }

    pub fn token_grid(&self) -> GridDims {
        let side = self.latent_side() / self.patch;
        GridDims { rows: side, cols: side }
    }

    pub fn token_dim(&self) -> usize {
        self.latent_channels() * self.patch * self.patch
    }

    pub fn n_blocks(&self) -> usize {
        self.n_double + self.n_single
    }

    pub fn validate(&self) -> Result<()> {
        self.rope.validate()?;
        let bad = |msg: String| Err(Error::domain("model_config", msg));
        if self.d_model != self.n_heads * self.head_dim() {
            return bad(format!(
                "d_model {} != {} heads x head dim {}",
                self.d_model,
                self.n_heads,
                self.head_dim()
            ));
        }
        if !self.image_size.is_multiple_of(codec::FOLD * crate::identity::STUB_GRID) {
            return bad(format!("image size {} must be a multiple of 16", self.image_size));
        }
        if !self.latent_side().is_multiple_of(self.patch) {
            return bad(format!("latent side {} not divisible by patch {}", self.latent_side(), self.patch));
        }
        if self.n_text == 0 || self.mlp_ratio == 0 || self.sigma_embed_dim < 2 || !self.sigma_embed_dim.is_multiple_of(2) {
            return bad("n_text, mlp_ratio must be positive and sigma_embed_dim even".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.normal(format!("{name}.w"), &[fan_in, fan_out], std, rng)?,
            b: store.zeros(format!("{name}.b"), &[1, fan_out])?,
        })
    }

    fn standard<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Self::init(store, name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct StreamParams {
    modulation: Linear,
    qkv: Linear,
    out: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl StreamParams {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            modulation: Linear::init(store, &format!("{name}.mod"), d, DELTAS_PER_BLOCK * d, 0.5 / (d as f64).sqrt(), rng)?,
            qkv: Linear::standard(store, &format!("{name}.qkv"), d, 3 * d, rng)?,
            out: Linear::standard(store, &format!("{name}.out"), d, d, rng)?,
            mlp_in: Linear::standard(store, &format!("{name}.mlp.in"), d, hidden, rng)?,
            mlp_out: Linear::standard(store, &format!("{name}.mlp.out"), hidden, d, rng)?,
        })
    }
}

#[derive(Clone, Debug)]
struct DoubleBlock {
    image: StreamParams,
    text: StreamParams,
}

#[derive(Clone, Debug)]
struct ModelParams {
    image_in: Linear,
    text_tokens: ParamId,
    sigma_in: Linear,
    sigma_out: Linear,
    double: Vec<DoubleBlock>,
    single: Vec<StreamParams>,
    final_mod: Linear,
    final_out: Linear,
    identity: IdentityParams,
    structure: StructureParams,
}

/// Which side pathways a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adapters {
    pub identity: bool,
    pub memory: bool,
    pub residual: bool,
}

impl Adapters {
    pub const ALL: Adapters = Adapters {
        identity: true,
        memory: true,
        residual: true,
    };
    pub const NONE: Adapters = Adapters {
        identity: false,
        memory: false,
        residual: false,
    };
    /// Guidance-free branch: keeps the degraded evidence, drops identity
    /// modulation and the memory read.
    pub const UNCONDITIONAL: Adapters = Adapters {
        identity: false,
        memory: false,
        residual: true,
    };

    pub fn for_branch(branch: Branch) -> Self {
        match branch {
            Branch::Conditional => Self::ALL,
            Branch::Unconditional => Self::UNCONDITIONAL,
        }
    }
}

/// Conditioning derived once from a degraded image and its references.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub degraded_image: Grid,
    pub deg_tokens: Tensor,
    pub detail_tokens: Tensor,
    pub ref_tokens: Vec<Tensor>,
    pub anchor: IdentityAnchor,
    pub layout: SequenceLayout,
}

impl Prepared {
    pub fn reference_count(&self) -> usize {
        self.ref_tokens.len()
    }
}

/// Nodes of one forward pass that callers may want to inspect.
pub struct ForwardNodes {
    /// Scene-token flow prediction `[n_scene, token_dim]`.
    pub flow: Var,
    /// Text hidden state after each block.
    pub text_states: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    store: ParamStore,
    stub: StubEncoder,
    embedding_map: LatentEmbeddingMap,
}

fn sigma_features(sigma: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let t = sigma * 1000.0;
    let mut v = Vec::with_capacity(dim);
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v.push((t * f).cos());
    }
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v.push((t * f).sin());
    }
    Tensor::row(v)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let hidden = d * config.mlp_ratio;
        let token_dim = config.token_dim();

        let image_in = Linear::standard(&mut store, "image_in", token_dim, d, &mut rng)?;
        let text_tokens = store.normal("text_tokens", &[config.n_text, d], 1.0, &mut rng)?;
        let sigma_in = Linear::standard(&mut store, "sigma.in", config.sigma_embed_dim, d, &mut rng)?;
        let sigma_out = Linear::standard(&mut store, "sigma.out", d, d, &mut rng)?;
        let mut double = Vec::with_capacity(config.n_double);
        for b in 0..config.n_double {
            double.push(DoubleBlock {
                image: StreamParams::init(&mut store, &format!("double.{b}.image"), d, hidden, &mut rng)?,
                text: StreamParams::init(&mut store, &format!("double.{b}.text"), d, hidden, &mut rng)?,
            });
        }
        let mut single = Vec::with_capacity(config.n_single);
        for b in 0..config.n_single {
            single.push(StreamParams::init(&mut store, &format!("single.{b}"), d, hidden, &mut rng)?);
        }
        let final_mod = Linear::init(&mut store, "final.mod", d, 2 * d, 0.5 / (d as f64).sqrt(), &mut rng)?;
        let final_out = Linear::standard(&mut store, "final.out", d, token_dim, &mut rng)?;
        let identity = IdentityParams::init(&mut store, config.id_dim, d, config.n_blocks(), &mut rng)?;
        let structure = StructureParams::init(
            &mut store,
            &StructureShape {
                token_dim,
                n_tokens: config.token_grid().count(),
                d_model: d,
                rank: config.rank,
                memory_budget: config.memory_budget,
                n_blocks: config.n_blocks(),
                strength: config.degraded_strength,
            },
            &mut rng,
        )?;
        let stub = StubEncoder::new(config.stub_seed, config.id_dim, config.image_channels)?;
        let embedding_map = stub.latent_token_map((config.image_size, config.image_size), config.patch)?;
        Ok(Self {
            config,
            params: ModelParams {
                image_in,
                text_tokens,
                sigma_in,
                sigma_out,
                double,
                single,
                final_mod,
                final_out,
                identity,
                structure,
            },
            store,
            stub,
            embedding_map,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stub(&self) -> &StubEncoder {
        &self.stub
    }

    pub fn embedding_map(&self) -> &LatentEmbeddingMap {
        &self.embedding_map
    }

    pub fn identity_params(&self) -> &IdentityParams {
        &self.params.identity
    }

    pub fn structure_params(&self) -> &StructureParams {
        &self.params.structure
    }

    /// Latent tokens of an image on the scene grid.
    pub fn image_tokens(&self, image: &Grid) -> Result<Tensor> {
        let latent = codec::encode(image)?;
        let (_, h, w) = self.config.latent_shape();
        let latent = resize_to_scene(&latent, h, w)?;
        Ok(patchify(&latent, self.config.patch)?.0)
    }

    pub fn tokens_to_latent(&self, tokens: &Tensor) -> Result<LatentGrid> {
        unpatchify(tokens, self.config.token_grid(), self.config.latent_channels(), self.config.patch)
    }

    pub fn latent_to_tokens(&self, latent: &LatentGrid) -> Result<Tensor> {
        if latent.shape() != self.config.latent_shape() {
            return Err(Error::dim(
                "latent_to_tokens",
                format!("{:?} vs {:?}", latent.shape(), self.config.latent_shape()),
            ));
        }
        Ok(patchify(latent, self.config.patch)?.0)
    }

    /// Encodes the conditioning inputs. References are put into a canonical
    /// order (descending embedding norm) so the result does not depend on the
    /// order they were supplied in.
    pub fn prepare(&self, degraded: &Grid, refs: &[Grid]) -> Result<Prepared> {
        if refs.len() > MAX_REFERENCES {
            return Err(Error::Usage(format!("{} references supplied, at most {MAX_REFERENCES}", refs.len())));
        }
        let deg_latent = codec::encode(degraded)?;
        let (_, h, w) = self.config.latent_shape();
        let deg_latent = resize_to_scene(&deg_latent, h, w)?;
        let deg_tokens = patchify(&deg_latent, self.config.patch)?.0;
        let detail_tokens = patchify(&detail_input(&deg_latent)?, self.config.patch)?.0;

        let mut encoded = refs
            .iter()
            .map(|r| Ok((self.stub.encode(r)?, r)))
            .collect::<Result<Vec<_>>>()?;
        encoded.sort_by(|(a, _), (b, _)| {
            b.norm().total_cmp(&a.norm()).then_with(|| {
                a.z.iter()
                    .zip(&b.z)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let embeddings: Vec<_> = encoded.iter().map(|(e, _)| e.clone()).collect();
        let anchor = select_anchor(&embeddings, degraded, &self.stub, self.config.temperature)?;
        let ref_tokens = encoded
            .iter()
            .map(|(_, img)| self.image_tokens(img))
            .collect::<Result<Vec<_>>>()?;
        let grid = self.config.token_grid();
        let layout = SequenceLayout::new(self.config.n_text, grid, grid, &vec![grid; ref_tokens.len()])?;
        Ok(Prepared {
            degraded_image: degraded.clone(),
            deg_tokens,
            detail_tokens,
            ref_tokens,
            anchor,
            layout,
        })
    }

    fn sigma_conditioning(&self, g: &mut Graph, sigma: f64) -> Result<Var> {
        let f = g.leaf(sigma_features(sigma, self.config.sigma_embed_dim))?;
        let h = self.params.sigma_in.apply(g, &self.store, f)?;
        let h = g.gelu(h)?;
        let c = self.params.sigma_out.apply(g, &self.store, h)?;
        g.gelu(c)
    }

    /// Full prediction graph: embeds `z_tokens` and the prepared conditioning,
    /// then runs the backbone with the requested side pathways.
    pub fn flow_graph(&self, g: &mut Graph, prep: &Prepared, z_tokens: Var, sigma: f64, adapters: Adapters) -> Result<ForwardNodes> {
        let store = &self.store;
        let p = &self.params;
        let scene = p.image_in.apply(g, store, z_tokens)?;
        let deg_leaf = g.leaf(prep.deg_tokens.clone())?;
        let scene = if adapters.residual {
            p.structure.input_residual(g, store, scene, deg_leaf)?
        } else {
            scene
        };
        let deg = p.image_in.apply(g, store, deg_leaf)?;
        let text = g.param(store, p.text_tokens)?;
        let mut parts = vec![text, scene, deg];
        for r in &prep.ref_tokens {
            let leaf = g.leaf(r.clone())?;
            parts.push(p.image_in.apply(g, store, leaf)?);
        }
        let features = g.concat_rows(&parts)?;

        let deltas = if adapters.identity {
            Some(p.identity.deltas(g, store, &prep.anchor.direction_tensor())?)
        } else {
            None
        };
        let memory = if adapters.memory {
            let detail = g.leaf(prep.detail_tokens.clone())?;
            Some(p.structure.build_memory(g, store, deg_leaf, detail)?.var)
        } else {
            None
        };
        self.backbone(g, features, &prep.layout, sigma, deltas.as_deref(), memory)
    }

    /// The transformer over an already-assembled sequence.
    pub fn backbone(
        &self,
        g: &mut Graph,
        features: Var,
        layout: &SequenceLayout,
        sigma: f64,
        deltas: Option<&[Var]>,
        memory: Option<Var>,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        let store = &self.store;
        let (n, width) = g.value(features).dims2()?;
        if n != layout.len() || width != cfg.d_model {
            return Err(Error::dim(
                "backbone",
                format!("features [{n}x{width}] vs layout {} x d_model {}", layout.len(), cfg.d_model),
            ));
        }
        if layout.offsets.first().map(|o| o.0) != Some(Segment::Text) {
            return Err(Error::dim("backbone", "sequence must start with the text segment"));
        }
        if let Some(d) = deltas {
            if d.len() != cfg.n_blocks() {
                return Err(Error::dim("backbone", format!("{} delta blocks for {} blocks", d.len(), cfg.n_blocks())));
            }
        }
        let n_text = layout.text_len();
        let n_img = n - n_text;
        let (scene_start, n_scene) = layout
            .span(Segment::Scene)
            .ok_or_else(|| Error::dim("backbone", "no scene segment"))?;
        let (cos, sin) = cfg.rope.tables(&layout.ids);
        let mask: Vec<bool> = (0..n)
            .flat_map(|i| (0..n).map(move |j| i >= n_text || j < n_text))
            .collect();
        let attn = AttentionCtx {
            cos: &cos,
            sin: &sin,
            mask: &mask,
            heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
        };

        let c = self.sigma_conditioning(g, sigma)?;
        let mut text = g.slice_rows(features, 0, n_text)?;
        let mut img = g.slice_rows(features, n_text, n_img)?;
        let mut text_states = Vec::with_capacity(cfg.n_blocks());

        for (b, block) in self.params.double.iter().enumerate() {
            let m_txt = block.text.modulation.apply(g, store, c)?;
            let m_img_base = block.image.modulation.apply(g, store, c)?;
            let m_img = match deltas {
                Some(d) => g.add(m_img_base, d[b])?,
                None => m_img_base,
            };
            let mt = RowModulation::uniform(g, m_txt, n_text, cfg.d_model)?;
            let mi = RowModulation::uniform(g, m_img, n_img, cfg.d_model)?;

            let xt = mt.pre(g, text, 0)?;
            let xi = mi.pre(g, img, 0)?;
            let (qt, kt, vt) = split_qkv(g, store, &block.text.qkv, xt, cfg.d_model)?;
            let (qi, ki, vi) = split_qkv(g, store, &block.image.qkv, xi, cfg.d_model)?;
            let q = g.concat_rows(&[qt, qi])?;
            let k = g.concat_rows(&[kt, ki])?;
            let v = g.concat_rows(&[vt, vi])?;
            let a = attn.apply(g, q, k, v)?;
            let at = g.slice_rows(a, 0, n_text)?;
            let ai = g.slice_rows(a, n_text, n_img)?;
            let at = block.text.out.apply(g, store, at)?;
            let ai = block.image.out.apply(g, store, ai)?;
            text = mt.residual(g, text, at, 0)?;
            img = mi.residual(g, img, ai, 0)?;

            if let Some(mem) = memory {
                img = self.params.structure.cross_attention(g, store, b, img, mem, cfg.n_heads)?;
            }

            let ht = mt.pre(g, text, 1)?;
            let ht = mlp(g, store, &block.text, ht)?;
            text = mt.residual(g, text, ht, 1)?;
            let hi = mi.pre(g, img, 1)?;
            let hi = mlp(g, store, &block.image, hi)?;
            img = mi.residual(g, img, hi, 1)?;
            text_states.push(text);
        }

        for (s, block) in self.params.single.iter().enumerate() {
            let b = cfg.n_double + s;
            let base = block.modulation.apply(g, store, c)?;
            let img_mod = match deltas {
                Some(d) => g.add(base, d[b])?,
                None => base,
            };
            let m = RowModulation::split(g, base, n_text, img_mod, n_img, cfg.d_model)?;

            let x = g.concat_rows(&[text, img])?;
            let h = m.pre(g, x, 0)?;
            let (q, k, v) = split_qkv(g, store, &block.qkv, h, cfg.d_model)?;
            let a = attn.apply(g, q, k, v)?;
            let a = block.out.apply(g, store, a)?;
            let x = m.residual(g, x, a, 0)?;
            text = g.slice_rows(x, 0, n_text)?;
            img = g.slice_rows(x, n_text, n_img)?;

            if let Some(mem) = memory {
                img = self.params.structure.cross_attention(g, store, b, img, mem, cfg.n_heads)?;
            }

            let x = g.concat_rows(&[text, img])?;
            let h = m.pre(g, x, 1)?;
            let h = mlp(g, store, block, h)?;
            let x = m.residual(g, x, h, 1)?;
            text = g.slice_rows(x, 0, n_text)?;
            img = g.slice_rows(x, n_text, n_img)?;
            text_states.push(text);
        }

        let scene = g.slice_rows(img, scene_start - n_text, n_scene)?;
        let fm = self.params.final_mod.apply(g, store, c)?;
        let scale = g.slice_cols(fm, 0, cfg.d_model)?;
        let shift = g.slice_cols(fm, cfg.d_model, cfg.d_model)?;
        let scale = g.add_const(scale, 1.0)?;
        let h = g.layernorm_affine(scene, scale, shift)?;
        let flow = self.params.final_out.apply(g, store, h)?;
        Ok(ForwardNodes { flow, text_states })
    }

    /// Evaluates the backbone on an assembled sequence with optional
    /// precomputed identity deltas and degraded memory.
    pub fn forward(
        &self,
        seq: &TokenSequence,
        sigma: f64,
        deltas: Option<&ModulationDeltas>,
        memory: Option<&DegradedMemory>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let features = g.leaf(seq.features.clone())?;
        let delta_vars = match deltas {
            Some(d) => Some(
                d.double
                    .iter()
                    .chain(&d.single)
                    .map(|b| g.leaf(b.0.clone()))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let mem = memory.map(|m| g.leaf(m.m.clone())).transpose()?;
        let out = self.backbone(&mut g, features, &seq.layout, sigma, delta_vars.as_deref(), mem)?;
        Ok(g.value(out.flow).clone())
    }

    /// Flow prediction on latent grids for prepared conditioning.
    pub fn predict_prepared(&self, prep: &Prepared, z_sigma: &LatentGrid, sigma: f64, adapters: Adapters) -> Result<LatentGrid> {
        let mut g = Graph::new();
        let z = g.leaf(self.latent_to_tokens(z_sigma)?)?;
        let out = self.flow_graph(&mut g, prep, z, sigma, adapters)?;
        self.tokens_to_latent(g.value(out.flow))
    }

    /// `u_hat = f(z_sigma, degraded, references, sigma)` with every pathway on.
    pub fn predict_flow(&self, z_sigma: &LatentGrid, degraded: &Grid, refs: &[Grid], sigma: f64) -> Result<LatentGrid> {
        let prep = self.prepare(degraded, refs)?;
        self.predict_prepared(&prep, z_sigma, sigma, Adapters::ALL)
    }

    /// Same composition with every side pathway switched off.
    pub fn predict_bare(&self, z_sigma: &LatentGrid, degraded: &Grid, refs: &[Grid], sigma: f64) -> Result<LatentGrid> {
        let prep = self.prepare(degraded, refs)?;
        self.predict_prepared(&prep, z_sigma, sigma, Adapters::NONE)
    }

    /// Binds prepared conditioning for the sampler.
    pub fn conditioned<'a>(&'a self, prep: &'a Prepared) -> Conditioned<'a> {
        Conditioned { model: self, prep }
    }

    /// Replaces every zero-initialised adapter tensor (identity heads, residual
    /// up-projection, memory gates) with seeded Gaussian values, so the side
    /// pathways become active without training.
    pub fn randomize_adapters(&mut self, seed: u64, std: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<ParamId> = Vec::new();
        for &(w, b) in &self.params.identity.heads {
            ids.extend([w, b]);
        }
        ids.push(self.params.structure.residual_up);
        ids.extend(self.params.structure.blocks.iter().map(|b| b.gate));
        for id in ids {
            let shape = self.store.get(id).shape().to_vec();
            let n = shape.iter().product();
            let data = (0..n).map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            self.store.set(id, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }

    pub(crate) fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(config)?;
        if store.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                model.store.len()
            )));
        }
        for (name, value) in store.iter() {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            model.store.set(id, value.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }
}

pub struct Conditioned<'a> {
    model: &'a Model,
    prep: &'a Prepared,
}

impl FlowModel for Conditioned<'_> {
    fn latent_shape(&self) -> (usize, usize, usize) {
        self.model.config.latent_shape()
    }

    fn predict(&self, z: &LatentGrid, sigma: f64, branch: Branch) -> Result<LatentGrid> {
        self.model.predict_prepared(self.prep, z, sigma, Adapters::for_branch(branch))
    }
}

struct AttentionCtx<'a> {
    cos: &'a [f64],
    sin: &'a [f64],
    mask: &'a [bool],
    heads: usize,
    head_dim: usize,
}

impl AttentionCtx<'_> {
    fn apply(&self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
        let q = g.rope(q, self.cos.to_vec(), self.sin.to_vec(), self.head_dim)?;
        let k = g.rope(k, self.cos.to_vec(), self.sin.to_vec(), self.head_dim)?;
        g.attention_masked(q, k, v, self.heads, self.mask)
    }
}

fn split_qkv(g: &mut Graph, store: &ParamStore, qkv: &Linear, x: Var, d: usize) -> Result<(Var, Var, Var)> {
    let h = qkv.apply(g, store, x)?;
    Ok((g.slice_cols(h, 0, d)?, g.slice_cols(h, d, d)?, g.slice_cols(h, 2 * d, d)?))
}

fn mlp(g: &mut Graph, store: &ParamStore, p: &StreamParams, x: Var) -> Result<Var> {
    let h = p.mlp_in.apply(g, store, x)?;
    let h = g.gelu(h)?;
    p.mlp_out.apply(g, store, h)
}

/// Per-row (scale, shift, gate) matrices for the two sub-layers of a block.
/// Chunk order in a `[1, 6d]` modulation row: scale, shift, gate for
/// attention, then scale, shift, gate for the MLP.
struct RowModulation {
    scale: [Var; 2],
    shift: [Var; 2],
    gate: [Var; 2],
}

impl RowModulation {
    fn chunks(g: &mut Graph, row: Var, d: usize) -> Result<[Var; 6]> {
        let mut out = [row; 6];
        for (k, o) in out.iter_mut().enumerate() {
            *o = g.slice_cols(row, k * d, d)?;
        }
        Ok(out)
    }

    fn uniform(g: &mut Graph, row: Var, n: usize, d: usize) -> Result<Self> {
        let c = Self::chunks(g, row, d)?;
        let mut rows = [row; 6];
        for (k, r) in rows.iter_mut().enumerate() {
            let v = if k % 3 == 0 { g.add_const(c[k], 1.0)? } else { c[k] };
            *r = g.broadcast_rows(v, n)?;
        }
        Ok(Self::from_rows(rows))
    }

    /// Text rows take `text_row`, image rows take `image_row`.
    fn split(g: &mut Graph, text_row: Var, n_text: usize, image_row: Var, n_img: usize, d: usize) -> Result<Self> {
        let ct = Self::chunks(g, text_row, d)?;
        let ci = Self::chunks(g, image_row, d)?;
        let mut rows = [text_row; 6];
        for (k, r) in rows.iter_mut().enumerate() {
            let (t, i) = if k % 3 == 0 {
                (g.add_const(ct[k], 1.0)?, g.add_const(ci[k], 1.0)?)
            } else {
                (ct[k], ci[k])
            };
            let t = g.broadcast_rows(t, n_text)?;
            let i = g.broadcast_rows(i, n_img)?;
            *r = g.concat_rows(&[t, i])?;
        }
        Ok(Self::from_rows(rows))
    }

    fn from_rows(r: [Var; 6]) -> Self {
        Self {
            scale: [r[0], r[3]],
            shift: [r[1], r[4]],
            gate: [r[2], r[5]],
        }
    }

    /// `layernorm(x) * (1 + scale) + shift`.
    fn pre(&self, g: &mut Graph, x: Var, sub: usize) -> Result<Var> {
        let h = g.layernorm(x)?;
        let h = g.mul(h, self.scale[sub])?;
        g.add(h, self.shift[sub])
    }

    /// `x + gate * y`.
    fn residual(&self, g: &mut Graph, x: Var, y: Var, sub: usize) -> Result<Var> {
        let gy = g.mul(self.gate[sub], y)?;
        g.add(x, gy)
    }
}
