//! Degraded-image reinforcement: resize, low-rank input residual, the
//! two-route pooled memory and the gated low-rank cross-attention read.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, LatentGrid};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_DEGRADED_STRENGTH: f64 = 1.0;
pub const FULL_SCALE_MEMORY: usize = 256;
pub const FULL_SCALE_RANK: usize = 16;

/// Bilinear resize with aligned corners, channel by channel.
pub fn resize_to_scene(deg: &LatentGrid, target_h: usize, target_w: usize) -> Result<LatentGrid> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::domain("resize_to_scene", "target extents must be positive"));
    }
    let (c, h, w) = deg.shape();
    if (h, w) == (target_h, target_w) {
        return Ok(deg.clone());
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    Ok(Grid::from_fn(c, target_h, target_w, |ch, y, x| {
        let (y0, y1, fy) = coord(y, target_h, h);
        let (x0, x1, fx) = coord(x, target_w, w);
        let top = deg.get(ch, y0, x0) * (1.0 - fx) + deg.get(ch, y0, x1) * fx;
        let bottom = deg.get(ch, y1, x0) * (1.0 - fx) + deg.get(ch, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// 3x3 box average with replicate padding.
pub fn smooth(x: &LatentGrid) -> LatentGrid {
    let (c, h, w) = x.shape();
    Grid::from_fn(c, h, w, |ch, y, xx| {
        let mut s = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let xc = (xx as i64 + dx).clamp(0, w as i64 - 1) as usize;
                s += x.get(ch, yy, xc);
            }
        }
        s / 9.0
    })
}

/// High-pass input of the detail route.
pub fn detail_input(x: &LatentGrid) -> Result<LatentGrid> {
    x.sub(&smooth(x))
}

#[derive(Clone, Debug)]
pub struct PoolerParams {
    pub queries: ParamId,
    pub key_w: ParamId,
    pub key_pos: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
}

impl PoolerParams {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        n_queries: usize,
        n_tokens: usize,
        token_dim: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let in_std = 1.0 / (token_dim as f64).sqrt();
        Ok(Self {
            queries: store.normal(format!("{prefix}.queries"), &[n_queries, d_model], 1.0, rng)?,
            key_w: store.normal(format!("{prefix}.key.w"), &[token_dim, d_model], in_std, rng)?,
            key_pos: store.normal(format!("{prefix}.key.pos"), &[n_tokens, d_model], 1.0, rng)?,
            value_w: store.normal(format!("{prefix}.value.w"), &[token_dim, d_model], in_std, rng)?,
            value_b: store.zeros(format!("{prefix}.value.b"), &[1, d_model])?,
        })
    }

    /// Single-head cross-attention from the learned queries to `tokens`.
    /// Keys carry a learned per-position code, so the pool is not invariant
    /// to reordering its input tokens.
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let q = g.param(store, self.queries)?;
        let kw = g.param(store, self.key_w)?;
        let kp = g.param(store, self.key_pos)?;
        let vw = g.param(store, self.value_w)?;
        let vb = g.param(store, self.value_b)?;
        let k = g.matmul(tokens, kw)?;
        if g.value(k).shape() != g.value(kp).shape() {
            return Err(Error::dim("pool", "token count differs from the positional table"));
        }
        let k = g.add(k, kp)?;
        let v = g.matmul(tokens, vw)?;
        let v = g.add_row(v, vb)?;
        g.attention(q, k, v, 1)
    }
}

#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub query_w: ParamId,
    pub key_down: ParamId,
    pub key_up: ParamId,
    pub value_down: ParamId,
    pub value_up: ParamId,
    pub gate: ParamId,
}

#[derive(Clone, Debug)]
pub struct StructureParams {
    pub strength: f64,
    pub rank: usize,
    pub residual_down: ParamId,
    pub residual_up: ParamId,
    pub base: PoolerParams,
    pub detail: PoolerParams,
    pub blocks: Vec<CrossAttentionParams>,
}

pub struct StructureShape {
    pub token_dim: usize,
    pub n_tokens: usize,
    pub d_model: usize,
    pub rank: usize,
    pub memory_budget: usize,
    pub n_blocks: usize,
    pub strength: f64,
}

impl StructureParams {
    pub fn init<R: Rng>(store: &mut ParamStore, shape: &StructureShape, rng: &mut R) -> Result<Self> {
        let StructureShape {
            token_dim,
            n_tokens,
            d_model,
            rank,
            memory_budget,
            n_blocks,
            strength,
        } = *shape;
        if rank == 0 || memory_budget < 2 {
            return Err(Error::domain("structure", "rank must be >= 1 and memory budget >= 2"));
        }
        let n_base = memory_budget / 2;
        let n_detail = memory_budget - n_base;
        let d_std = 1.0 / (d_model as f64).sqrt();
        let r_std = 1.0 / (rank as f64).sqrt();
        let residual_down = store.normal("structure.residual.down", &[token_dim, rank], 1.0 / (token_dim as f64).sqrt(), rng)?;
        let residual_up = store.zeros("structure.residual.up", &[rank, d_model])?;
        let base = PoolerParams::init(store, "structure.pool.base", n_base, n_tokens, token_dim, d_model, rng)?;
        let detail = PoolerParams::init(store, "structure.pool.detail", n_detail, n_tokens, token_dim, d_model, rng)?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let p = format!("structure.xattn.{b}");
            blocks.push(CrossAttentionParams {
                query_w: store.normal(format!("{p}.query.w"), &[d_model, d_model], d_std, rng)?,
                key_down: store.normal(format!("{p}.key.down"), &[d_model, rank], d_std, rng)?,
                key_up: store.normal(format!("{p}.key.up"), &[rank, d_model], r_std, rng)?,
                value_down: store.normal(format!("{p}.value.down"), &[d_model, rank], d_std, rng)?,
                value_up: store.normal(format!("{p}.value.up"), &[rank, d_model], r_std, rng)?,
                gate: store.zeros(format!("{p}.gate"), &[1, 1])?,
            });
        }
        Ok(Self {
            strength,
            rank,
            residual_down,
            residual_up,
            base,
            detail,
            blocks,
        })
    }

    pub fn memory_budget(&self, store: &ParamStore) -> usize {
        store.get(self.base.queries).rows() + store.get(self.detail.queries).rows()
    }

    /// `x_scene + s * (deg_tokens * down * up)`.
    pub fn input_residual(&self, g: &mut Graph, store: &ParamStore, scene: Var, deg_tokens: Var) -> Result<Var> {
        if g.value(scene).rows() != g.value(deg_tokens).rows() {
            return Err(Error::dim(
                "input_residual",
                format!("{} scene vs {} degraded tokens", g.value(scene).rows(), g.value(deg_tokens).rows()),
            ));
        }
        let down = g.param(store, self.residual_down)?;
        let up = g.param(store, self.residual_up)?;
        let r = g.matmul(deg_tokens, down)?;
        let r = g.matmul(r, up)?;
        let r = g.scale(r, self.strength)?;
        g.add(scene, r)
    }

    /// `[P_base(deg); P_detail(deg - smooth(deg))]`.
    pub fn build_memory(&self, g: &mut Graph, store: &ParamStore, deg_tokens: Var, detail_tokens: Var) -> Result<MemoryNode> {
        let base = self.base.pool(g, store, deg_tokens)?;
        let detail = self.detail.pool(g, store, detail_tokens)?;
        let boundary = g.value(base).rows();
        Ok(MemoryNode {
            var: g.concat_rows(&[base, detail])?,
            boundary,
        })
    }

    /// `h + gate * Attn(h Wq, M Kd Ku, M Vd Vu)`.
    pub fn cross_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        h: Var,
        mem: Var,
        heads: usize,
    ) -> Result<Var> {
        let p = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::dim("cross_attention", format!("no parameters for block {block}")))?;
        let wq = g.param(store, p.query_w)?;
        let kd = g.param(store, p.key_down)?;
        let ku = g.param(store, p.key_up)?;
        let vd = g.param(store, p.value_down)?;
        let vu = g.param(store, p.value_up)?;
        let gate = g.param(store, p.gate)?;
        let q = g.matmul(h, wq)?;
        let k = g.matmul(mem, kd)?;
        let k = g.matmul(k, ku)?;
        let v = g.matmul(mem, vd)?;
        let v = g.matmul(v, vu)?;
        let read = g.attention(q, k, v, heads)?;
        let read = g.mul_scalar(read, gate)?;
        g.add(h, read)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryNode {
    pub var: Var,
    pub boundary: usize,
}

/// Evaluated two-route memory: the first `route_boundary` rows are the base
/// route, the rest the detail route.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradedMemory {
    pub m: Tensor,
    pub route_boundary: usize,
}

impl DegradedMemory {
    pub fn base(&self) -> Result<Tensor> {
        self.m.slice_rows(0, self.route_boundary)
    }

    pub fn detail(&self) -> Result<Tensor> {
        self.m.slice_rows(self.route_boundary, self.m.rows() - self.route_boundary)
    }
}

/// Evaluates [`StructureParams::build_memory`] on constant token inputs.
pub fn build_memory(params: &StructureParams, store: &ParamStore, deg_tokens: &Tensor, detail_tokens: &Tensor) -> Result<DegradedMemory> {
    let mut g = Graph::new();
    let d = g.leaf(deg_tokens.clone())?;
    let t = g.leaf(detail_tokens.clone())?;
    let node = params.build_memory(&mut g, store, d, t)?;
    Ok(DegradedMemory {
        m: g.value(node.var).clone(),
        route_boundary: node.boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constants() {
        let g = Grid::from_fn(2, 3, 3, |c, y, x| (c + y * 3 + x) as f64);
        assert_eq!(resize_to_scene(&g, 3, 3).unwrap(), g);
        let c = Grid::filled(1, 2, 3, 0.7);
        let r = resize_to_scene(&c, 5, 7).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(resize_to_scene(&c, 0, 2).is_err());
    }

    #[test]
    fn resize_interpolates_columns() {
        let g = Grid::new(1, 2, 2, vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        let r = resize_to_scene(&g, 2, 4).unwrap();
        let expected = [0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0];
        for y in 0..2 {
            for (x, e) in expected.iter().enumerate() {
                assert!((r.get(0, y, x) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn smooth_constant_and_impulse() {
        let c = Grid::filled(2, 4, 4, -1.5);
        assert!(detail_input(&c).unwrap().data().iter().all(|&v| v.abs() < 1e-15));

        let mut imp = Grid::zeros(1, 5, 5);
        imp.set(0, 2, 2, 1.0);
        let s = smooth(&imp);
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
                let want = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!((s.get(0, y, x) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn smooth_is_linear() {
        let a = Grid::from_fn(1, 4, 5, |_, y, x| ((y * 5 + x) as f64).sin());
        let b = Grid::from_fn(1, 4, 5, |_, y, x| ((y + 2 * x) as f64).cos());
        let lhs = smooth(&a.add(&b).unwrap());
        let rhs = smooth(&a).add(&smooth(&b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }
}
