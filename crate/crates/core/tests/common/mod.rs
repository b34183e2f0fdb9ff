//! Fixtures shared by the gradient and acceptance targets.
#![allow(dead_code)]

use flowface::harness::train::{draw_sample, TrainConfig, TrainingSample};
use flowface::numerics::gradcheck::op_gradient_error;
use flowface::numerics::{Graph, Tensor, Var};
use flowface::tokens::{PositionId, RopeConfig};
use flowface::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// Every differentiable graph operation on small random inputs.
pub fn op_cases() -> Vec<OpCase> {
    let mask: Vec<bool> = (0..4 * 5).map(|i| i % 5 != 1 || i / 5 == 0).collect();
    let rope = RopeConfig {
        theta: 2000.0,
        axis_dims: [2, 2, 2, 2],
    };
    let ids: Vec<PositionId> = (0..3).map(|i| PositionId::new(i, 2 * i + 1, 3, i * i)).collect();
    let (cos, sin) = rope.tables(&ids);
    let target = Tensor::row(vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4]);
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])),
        case("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1])),
        case("add_row", &[&[3, 4], &[1, 4]], |g, v| g.add_row(v[0], v[1])),
        case("broadcast_rows", &[&[1, 4]], |g, v| g.broadcast_rows(v[0], 3)),
        case("scale", &[&[2, 3]], |g, v| g.scale(v[0], -1.7)),
        case("add_const", &[&[2, 3]], |g, v| g.add_const(v[0], 0.4)),
        case("mul_scalar", &[&[2, 3], &[1, 1]], |g, v| g.mul_scalar(v[0], v[1])),
        case("gelu", &[&[3, 5]], |g, v| g.gelu(v[0])),
        case("softmax_rows", &[&[3, 5]], |g, v| g.softmax_rows(v[0])),
        case("layernorm", &[&[3, 6]], |g, v| g.layernorm(v[0])),
        case("layernorm_affine", &[&[3, 6], &[1, 6], &[1, 6]], |g, v| g.layernorm_affine(v[0], v[1], v[2])),
        case("attention", &[&[4, 8], &[5, 8], &[5, 8]], |g, v| g.attention(v[0], v[1], v[2], 2)),
        case("attention_masked", &[&[4, 8], &[5, 8], &[5, 8]], move |g, v| {
            g.attention_masked(v[0], v[1], v[2], 2, &mask)
        }),
        case("rope", &[&[3, 16]], move |g, v| g.rope(v[0], cos.clone(), sin.clone(), 8)),
        case("slice_rows", &[&[5, 3]], |g, v| g.slice_rows(v[0], 1, 3)),
        case("slice_cols", &[&[3, 5]], |g, v| g.slice_cols(v[0], 2, 2)),
        case("concat_rows", &[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1], v[0]])),
        case("concat_cols", &[&[2, 3], &[2, 1]], |g, v| g.concat_cols(&[v[0], v[1]])),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("sum", &[&[2, 3]], |g, v| g.sum(v[0])),
        case("mean", &[&[2, 3]], |g, v| g.mean(v[0])),
        case("mse", &[&[2, 3], &[2, 3]], |g, v| g.mse(v[0], v[1])),
        case("cosine", &[&[1, 6]], move |g, v| g.cosine(v[0], &target)),
    ]
}

/// Worst relative error of one op over `seeds` random draws.
pub fn op_error(op: &OpCase, seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + op.name.len() as u64);
        let inputs: Vec<Tensor> = op
            .shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        worst = worst.max(op_gradient_error(&inputs, &op.build, seed).unwrap());
    }
    worst
}

/// A two-sample batch, one with at least two references and one without.
pub fn frozen_batch(cfg: &TrainConfig) -> Vec<TrainingSample> {
    let mut with = None;
    let mut without = None;
    for i in 0..64 {
        let s = draw_sample(cfg, 3, i).unwrap();
        if s.references.len() >= 2 && with.is_none() {
            with = Some(s);
        } else if s.references.is_empty() && without.is_none() {
            without = Some(s);
        }
    }
    vec![with.unwrap(), without.unwrap()]
}
