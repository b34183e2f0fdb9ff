//! Latent/token packing, four-axis position ids, rotary rotation and the
//! concatenated conditioning sequence.

use crate::error::{Error, Result};
use crate::grid::{Grid, LatentGrid};
use crate::numerics::Tensor;

pub const MAX_REFERENCES: usize = 3;
pub const DEGRADED_GROUP: usize = 2;
pub const REFERENCE_GROUP_BASE: usize = 10;

/// Token grid extents `(rows, cols)` after patchifying.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn count(self) -> usize {
        self.rows * self.cols
    }
}

/// Splits a grid into non-overlapping `patch x patch` tokens in row-major
/// patch order. Each token is laid out channel-major, then row, then column.
pub fn patchify(grid: &LatentGrid, patch: usize) -> Result<(Tensor, GridDims)> {
    let (c, h, w) = grid.shape();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim("patchify", format!("{h}x{w} not divisible by patch {patch}")));
    }
    let dims = GridDims {
        rows: h / patch,
        cols: w / patch,
    };
    let token_dim = c * patch * patch;
    let mut data = Vec::with_capacity(dims.count() * token_dim);
    for py in 0..dims.rows {
        for px in 0..dims.cols {
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        data.push(grid.get(ch, py * patch + dy, px * patch + dx));
                    }
                }
            }
        }
    }
    Ok((Tensor::matrix(dims.count(), token_dim, data)?, dims))
}

pub fn unpatchify(tokens: &Tensor, dims: GridDims, channels: usize, patch: usize) -> Result<LatentGrid> {
    let (n, d) = tokens.dims2()?;
    if n != dims.count() || d != channels * patch * patch {
        return Err(Error::dim(
            "unpatchify",
            format!("[{n}x{d}] vs grid {}x{} of {channels}x{patch}x{patch}", dims.rows, dims.cols),
        ));
    }
    let mut grid = Grid::zeros(channels, dims.rows * patch, dims.cols * patch);
    for py in 0..dims.rows {
        for px in 0..dims.cols {
            let row = tokens.row_slice(py * dims.cols + px);
            let mut i = 0;
            for ch in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        grid.set(ch, py * patch + dy, px * patch + dx, row[i]);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// `(t, h, w, l)` rotary position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PositionId {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub l: usize,
}

impl PositionId {
    pub const ORIGIN: PositionId = PositionId { t: 0, h: 0, w: 0, l: 0 };

    pub fn new(t: usize, h: usize, w: usize, l: usize) -> Self {
        Self { t, h, w, l }
    }

    pub fn axes(self) -> [usize; 4] {
        [self.t, self.h, self.w, self.l]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Text,
    Scene,
    Degraded,
    Reference(usize),
}

impl Segment {
    pub fn is_image(self) -> bool {
        !matches!(self, Segment::Text)
    }

    /// Temporal group id of image segments.
    pub fn temporal_group(self) -> Result<usize> {
        match self {
            Segment::Text | Segment::Scene => Ok(0),
            Segment::Degraded => Ok(DEGRADED_GROUP),
            Segment::Reference(r) if r < MAX_REFERENCES => Ok(REFERENCE_GROUP_BASE + r),
            Segment::Reference(r) => Err(Error::domain(
                "position_ids",
                format!("reference index {r} outside [0, {MAX_REFERENCES})"),
            )),
        }
    }
}

/// Row-major ids of an image segment on a token grid.
pub fn position_ids(segment: Segment, dims: GridDims) -> Result<Vec<PositionId>> {
    if segment == Segment::Text {
        return Ok(text_position_ids(dims.count()));
    }
    let t = segment.temporal_group()?;
    let mut ids = Vec::with_capacity(dims.count());
    for h in 0..dims.rows {
        for w in 0..dims.cols {
            ids.push(PositionId::new(t, h, w, 0));
        }
    }
    Ok(ids)
}

pub fn text_position_ids(n: usize) -> Vec<PositionId> {
    (0..n).map(|l| PositionId::new(0, 0, 0, l)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    pub theta: f64,
    pub axis_dims: [usize; 4],
}

impl RopeConfig {
    pub const FULL_SCALE_THETA: f64 = 2000.0;

    /// The full-scale layout: four axes of 32 channels, theta 2000.
    pub fn full_scale() -> Self {
        Self {
            theta: Self::FULL_SCALE_THETA,
            axis_dims: [32; 4],
        }
    }

    /// Same mechanism shrunk to a 16-wide head.
    pub fn toy() -> Self {
        Self {
            theta: Self::FULL_SCALE_THETA,
            axis_dims: [4; 4],
        }
    }

    pub fn head_dim(&self) -> usize {
        self.axis_dims.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.axis_dims.iter().find(|&&d| d == 0 || d % 2 != 0) {
            return Err(Error::domain("rope", format!("axis dim {d} must be even and positive")));
        }
        if !(self.theta > 0.0) {
            return Err(Error::domain("rope", "theta must be positive"));
        }
        Ok(())
    }

    /// Rotation angle of every channel pair of a head for one position.
    pub fn angles(&self, id: PositionId) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim() / 2);
        for (pos, &d) in id.axes().iter().zip(&self.axis_dims) {
            for m in 0..d / 2 {
                let freq = self.theta.powf(-2.0 * m as f64 / d as f64);
                out.push(*pos as f64 * freq);
            }
        }
        out
    }

    /// `(cos, sin)` tables, `ids.len() * head_dim / 2` entries each.
    pub fn tables(&self, ids: &[PositionId]) -> (Vec<f64>, Vec<f64>) {
        let mut cos = Vec::with_capacity(ids.len() * self.head_dim() / 2);
        let mut sin = Vec::with_capacity(cos.capacity());
        for &id in ids {
            for a in self.angles(id) {
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        (cos, sin)
    }
}

/// Rotates one head vector by its position.
pub fn rope_rotate(vec: &[f64], id: PositionId, cfg: &RopeConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if vec.len() != cfg.head_dim() {
        return Err(Error::dim("rope_rotate", format!("vector {} vs head dim {}", vec.len(), cfg.head_dim())));
    }
    let mut out = vec.to_vec();
    for (m, a) in cfg.angles(id).into_iter().enumerate() {
        let (s, c) = a.sin_cos();
        let (x0, x1) = (vec[2 * m], vec[2 * m + 1]);
        out[2 * m] = x0 * c - x1 * s;
        out[2 * m + 1] = x0 * s + x1 * c;
    }
    Ok(out)
}

/// Segment bookkeeping of a concatenated sequence, independent of features.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub ids: Vec<PositionId>,
    pub segments: Vec<Segment>,
    /// `(segment, start, len)` in canonical order.
    pub offsets: Vec<(Segment, usize, usize)>,
}

impl SequenceLayout {
    /// Canonical order: text, scene, degraded, then references `0..n`.
    /// With no references there is no reference segment at all.
    pub fn new(n_text: usize, scene: GridDims, degraded: GridDims, refs: &[GridDims]) -> Result<Self> {
        if refs.len() > MAX_REFERENCES {
            return Err(Error::Usage(format!(
                "{} references supplied, at most {MAX_REFERENCES} supported",
                refs.len()
            )));
        }
        let mut layout = SequenceLayout {
            ids: Vec::new(),
            segments: Vec::new(),
            offsets: Vec::new(),
        };
        if n_text > 0 {
            layout.push(Segment::Text, text_position_ids(n_text));
        }
        layout.push(Segment::Scene, position_ids(Segment::Scene, scene)?);
        layout.push(Segment::Degraded, position_ids(Segment::Degraded, degraded)?);
        for (r, &dims) in refs.iter().enumerate() {
            layout.push(Segment::Reference(r), position_ids(Segment::Reference(r), dims)?);
        }
        Ok(layout)
    }

    fn push(&mut self, segment: Segment, ids: Vec<PositionId>) {
        let start = self.ids.len();
        self.offsets.push((segment, start, ids.len()));
        self.segments.extend(std::iter::repeat_n(segment, ids.len()));
        self.ids.extend(ids);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn span(&self, segment: Segment) -> Option<(usize, usize)> {
        self.offsets
            .iter()
            .find(|(s, _, _)| *s == segment)
            .map(|&(_, start, len)| (start, len))
    }

    pub fn reference_count(&self) -> usize {
        self.offsets
            .iter()
            .filter(|(s, _, _)| matches!(s, Segment::Reference(_)))
            .count()
    }

    pub fn text_len(&self) -> usize {
        self.span(Segment::Text).map_or(0, |(_, n)| n)
    }
}

/// Features plus layout of the concatenated conditioning sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub features: Tensor,
    pub layout: SequenceLayout,
}

/// One image segment's tokens and the grid they came from.
#[derive(Clone, Debug)]
pub struct ImageTokens {
    pub tokens: Tensor,
    pub dims: GridDims,
}

pub fn assemble_sequence(
    scene: &ImageTokens,
    degraded: &ImageTokens,
    refs: &[ImageTokens],
    text: Option<&Tensor>,
) -> Result<TokenSequence> {
    let d = scene.tokens.cols();
    let mut parts: Vec<&Tensor> = Vec::new();
    if let Some(t) = text {
        parts.push(t);
    }
    parts.push(&scene.tokens);
    parts.push(&degraded.tokens);
    parts.extend(refs.iter().map(|r| &r.tokens));
    for p in &parts {
        if p.cols() != d {
            return Err(Error::dim("assemble_sequence", format!("token dim {} vs {d}", p.cols())));
        }
    }
    for (what, block) in [("scene", scene), ("degraded", degraded)].into_iter().chain(refs.iter().map(|r| ("reference", r))) {
        if block.tokens.rows() != block.dims.count() {
            return Err(Error::dim("assemble_sequence", format!("{what} tokens do not match grid")));
        }
    }
    let ref_dims: Vec<GridDims> = refs.iter().map(|r| r.dims).collect();
    let layout = SequenceLayout::new(text.map_or(0, Tensor::rows), scene.dims, degraded.dims, &ref_dims)?;
    Ok(TokenSequence {
        features: Tensor::concat_rows(&parts)?,
        layout,
    })
}

impl TokenSequence {
    pub fn segment_features(&self, segment: Segment) -> Option<Tensor> {
        let (start, len) = self.layout.span(segment)?;
        self.features.slice_rows(start, len).ok()
    }
}
