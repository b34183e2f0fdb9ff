//! Minimal dense array engine with reverse-mode gradients.

pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{quantize_f32, ParamId, ParamStore};
pub use tensor::{Tensor, LAYERNORM_EPS};

use crate::error::{Error, Result};

/// Softmax of a plain slice.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::domain("softmax", "empty input"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("softmax", "non-finite input"));
    }
    let mut out = x.to_vec();
    tensor::softmax_in_place(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_softmax_is_domain_error() {
        assert!(matches!(softmax(&[]), Err(Error::Domain { .. })));
    }
}
