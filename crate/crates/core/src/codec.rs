//! Fixed invertible map between grayscale images and latent grids.
//!
//! Pixels in `[0, 1]` are shifted to `[-1, 1]` and folded 2x2 space-to-depth,
//! so a `1 x 16 x 16` image becomes a `4 x 8 x 8` latent. Decoding is the
//! exact inverse up to floating-point rounding of the affine shift.

use crate::error::{Error, Result};
use crate::grid::{Grid, LatentGrid};

pub const FOLD: usize = 2;

pub fn encode(image: &Grid) -> Result<LatentGrid> {
    let (c, h, w) = image.shape();
    if h % FOLD != 0 || w % FOLD != 0 {
        return Err(Error::dim("encode", format!("{h}x{w} not divisible by {FOLD}")));
    }
    let (lh, lw) = (h / FOLD, w / FOLD);
    Ok(Grid::from_fn(c * FOLD * FOLD, lh, lw, |lc, y, x| {
        let src_c = lc / (FOLD * FOLD);
        let dy = (lc / FOLD) % FOLD;
        let dx = lc % FOLD;
        2.0 * image.get(src_c, y * FOLD + dy, x * FOLD + dx) - 1.0
    }))
}

pub fn decode(latent: &LatentGrid) -> Result<Grid> {
    let (lc, lh, lw) = latent.shape();
    if lc % (FOLD * FOLD) != 0 {
        return Err(Error::dim("decode", format!("{lc} latent channels not divisible by {}", FOLD * FOLD)));
    }
    Ok(Grid::from_fn(lc / (FOLD * FOLD), lh * FOLD, lw * FOLD, |c, y, x| {
        let sub = c * FOLD * FOLD + (y % FOLD) * FOLD + x % FOLD;
        0.5 * (latent.get(sub, y / FOLD, x / FOLD) + 1.0)
    }))
}

/// Image-space index `(c, y, x)` that latent element `(lc, y, x)` comes from.
pub fn source_pixel(lc: usize, y: usize, x: usize) -> (usize, usize, usize) {
    (lc / (FOLD * FOLD), y * FOLD + (lc / FOLD) % FOLD, x * FOLD + lc % FOLD)
}
