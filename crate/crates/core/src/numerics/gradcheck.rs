//! Central finite differences, the independent oracle for every backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-3;

/// Numerical gradient of a scalar function at `x` by central differences.
pub fn central_difference<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks the backward rule of a graph expression against central
/// differences. The expression output is contracted with a fixed random
/// weighting so every output element contributes. Returns the largest
/// relative error over the inputs.
pub fn op_gradient_error<F>(inputs: &[Tensor], build: F, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut g = Graph::new();
        let vars = inputs.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.value(out).shape().to_vec();
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?
    };
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = values.iter().map(|t| g.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let w = g.leaf(weights.clone())?;
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod)?;
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = eval(inputs)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *var);
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.to_vec();
                vals[i] = x.clone();
                let (g, _, loss) = eval(&vals)?;
                Ok(g.scalar_value(loss))
            },
            &inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Compares analytic and central-difference gradients of `loss` over the
/// given parameter scalars `(tensor, flat index)` of the store owned by
/// `owner`. Parameters are perturbed without `f32` rounding and restored
/// afterwards.
pub fn parameter_gradient_error<T, F>(
    owner: &mut T,
    store_of: fn(&mut T) -> &mut ParamStore,
    scalars: &[(ParamId, usize)],
    analytic: &[Tensor],
    mut loss: F,
) -> Result<f64>
where
    F: FnMut(&T) -> Result<f64>,
{
    let mut a = Vec::with_capacity(scalars.len());
    let mut n = Vec::with_capacity(scalars.len());
    for &(id, k) in scalars {
        let orig = store_of(owner).get(id).clone();
        let mut probe = orig.clone();
        probe.data_mut()[k] += FD_STEP;
        store_of(owner).set_exact(id, probe.clone());
        let up = loss(owner);
        probe.data_mut()[k] -= 2.0 * FD_STEP;
        store_of(owner).set_exact(id, probe);
        let down = loss(owner);
        store_of(owner).set_exact(id, orig);
        a.push(analytic[id.index()].data()[k]);
        n.push((up? - down?) / (2.0 * FD_STEP));
    }
    Ok(relative_error(&Tensor::row(a), &Tensor::row(n)))
}

/// One random scalar from every parameter tensor, topped up with uniform
/// draws until `fraction` of all scalars is covered.
pub fn sample_parameter_scalars(store: &ParamStore, fraction: f64, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut picked: Vec<(ParamId, usize)> = ids.iter().map(|&id| (id, rng.random_range(0..store.get(id).len()))).collect();
    let target = ((store.scalar_count() as f64 * fraction).ceil() as usize).max(picked.len());
    let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).len()).collect();
    let total: usize = sizes.iter().sum();
    while picked.len() < target {
        let mut flat = rng.random_range(0..total);
        for (&id, &len) in ids.iter().zip(&sizes) {
            if flat < len {
                if !picked.contains(&(id, flat)) {
                    picked.push((id, flat));
                }
                break;
            }
            flat -= len;
        }
    }
    picked
}
