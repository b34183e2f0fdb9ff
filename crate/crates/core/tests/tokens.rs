//! Rotary positions and sequence assembly.

use flowface::grid::Grid;
use flowface::numerics::{Graph, Tensor};
use flowface::tokens::{
    assemble_sequence, patchify, position_ids, rope_rotate, unpatchify, GridDims, ImageTokens, PositionId, RopeConfig,
    Segment, DEGRADED_GROUP, MAX_REFERENCES, REFERENCE_GROUP_BASE,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIPLES: usize = 100;

fn configs() -> [RopeConfig; 2] {
    [RopeConfig::toy(), RopeConfig::full_scale()]
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn along(axis: usize, p: usize) -> PositionId {
    let mut a = [0; 4];
    a[axis] = p;
    PositionId::new(a[0], a[1], a[2], a[3])
}

#[test]
fn zero_position_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in configs() {
        for _ in 0..TRIPLES {
            let q = vector(&mut rng, cfg.head_dim());
            assert_eq!(rope_rotate(&q, PositionId::ORIGIN, &cfg).unwrap(), q);
        }
    }
}

#[test]
fn rotation_preserves_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for cfg in configs() {
        for _ in 0..TRIPLES {
            let q = vector(&mut rng, cfg.head_dim());
            let id = PositionId::new(
                rng.random_range(0..64),
                rng.random_range(0..64),
                rng.random_range(0..64),
                rng.random_range(0..64),
            );
            let r = rope_rotate(&q, id, &cfg).unwrap();
            assert!((dot(&r, &r).sqrt() - dot(&q, &q).sqrt()).abs() < 1e-6);
        }
    }
}

#[test]
fn scores_depend_only_on_relative_position_per_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for cfg in configs() {
        for axis in 0..4 {
            for _ in 0..TRIPLES {
                let q = vector(&mut rng, cfg.head_dim());
                let k = vector(&mut rng, cfg.head_dim());
                let (pq, pk) = (rng.random_range(0..32), rng.random_range(0..32));
                let shift = rng.random_range(1..32);
                let score = |a: usize, b: usize| {
                    dot(
                        &rope_rotate(&q, along(axis, a), &cfg).unwrap(),
                        &rope_rotate(&k, along(axis, b), &cfg).unwrap(),
                    )
                };
                let d = (score(pq, pk) - score(pq + shift, pk + shift)).abs();
                assert!(d < 1e-5, "axis {axis}: {d:e}");
            }
        }
    }
}

#[test]
fn graph_rope_matches_single_vector_rotation() {
    let cfg = RopeConfig::toy();
    let hd = cfg.head_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids: Vec<PositionId> = (0..5).map(|i| PositionId::new(i % 3, i, 2 * i, 1)).collect();
    let x = Tensor::matrix(5, 2 * hd, vector(&mut rng, 10 * hd)).unwrap();
    let (cos, sin) = cfg.tables(&ids);
    let mut g = Graph::new();
    let v = g.leaf(x.clone()).unwrap();
    let r = g.rope(v, cos, sin, hd).unwrap();
    for (i, &id) in ids.iter().enumerate() {
        for h in 0..2 {
            let head = &x.row_slice(i)[h * hd..(h + 1) * hd];
            let want = rope_rotate(head, id, &cfg).unwrap();
            let got = &g.value(r).row_slice(i)[h * hd..(h + 1) * hd];
            for (a, b) in want.iter().zip(got) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

fn image_tokens(rows: usize, cols: usize, d: usize, fill: f64) -> ImageTokens {
    ImageTokens {
        tokens: Tensor::full(&[rows * cols, d], fill),
        dims: GridDims { rows, cols },
    }
}

#[test]
fn layout_groups_and_spans() {
    let scene = image_tokens(2, 2, 3, 0.0);
    let deg = image_tokens(2, 2, 3, 1.0);
    let refs: Vec<ImageTokens> = (0..MAX_REFERENCES).map(|r| image_tokens(2, 2, 3, 2.0 + r as f64)).collect();
    let text = Tensor::full(&[1, 3], -1.0);
    let seq = assemble_sequence(&scene, &deg, &refs, Some(&text)).unwrap();
    assert_eq!(seq.layout.len(), 1 + 4 * (2 + MAX_REFERENCES));
    assert_eq!(seq.layout.span(Segment::Scene), Some((1, 4)));
    assert_eq!(seq.layout.span(Segment::Degraded), Some((5, 4)));
    for r in 0..MAX_REFERENCES {
        let seg = Segment::Reference(r);
        assert_eq!(seq.layout.span(seg), Some((9 + 4 * r, 4)));
        assert_eq!(seq.segment_features(seg).unwrap().data()[0], 2.0 + r as f64);
        assert_eq!(seg.temporal_group().unwrap(), REFERENCE_GROUP_BASE + r);
    }
    assert_eq!(Segment::Degraded.temporal_group().unwrap(), DEGRADED_GROUP);
    let deg_ids = position_ids(Segment::Degraded, deg.dims).unwrap();
    let scene_ids = position_ids(Segment::Scene, scene.dims).unwrap();
    for (d, s) in deg_ids.iter().zip(&scene_ids) {
        assert_eq!((d.h, d.w, d.l), (s.h, s.w, s.l));
        assert_eq!((d.t, s.t), (DEGRADED_GROUP, 0));
    }
}

#[test]
fn no_references_means_no_reference_segment() {
    let seq = assemble_sequence(&image_tokens(2, 2, 3, 0.0), &image_tokens(2, 2, 3, 1.0), &[], None).unwrap();
    assert_eq!(seq.layout.reference_count(), 0);
    assert_eq!(seq.layout.span(Segment::Reference(0)), None);
    assert!(seq.layout.segments.iter().all(|s| !matches!(s, Segment::Reference(_))));
    assert_eq!(seq.layout.len(), 8);
}

#[test]
fn assembly_rejects_mismatched_blocks() {
    let scene = image_tokens(2, 2, 3, 0.0);
    assert!(assemble_sequence(&scene, &image_tokens(2, 2, 4, 0.0), &[], None).is_err());
    let refs: Vec<ImageTokens> = (0..=MAX_REFERENCES).map(|_| image_tokens(2, 2, 3, 0.0)).collect();
    assert!(assemble_sequence(&scene, &scene, &refs, None).is_err());
    let lying = ImageTokens {
        tokens: Tensor::zeros(&[3, 3]),
        dims: GridDims { rows: 2, cols: 2 },
    };
    assert!(assemble_sequence(&scene, &lying, &[], None).is_err());
}

proptest! {
    #[test]
    fn patchify_round_trips(seed in 0u64..500, c in 1usize..4, side in 1usize..5, patch in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = side * patch;
        let g = Grid::from_fn(c, n, n, |_, _, _| rng.random_range(-1.0..1.0));
        let (t, dims) = patchify(&g, patch).unwrap();
        prop_assert_eq!(t.shape(), &[side * side, c * patch * patch]);
        prop_assert_eq!(unpatchify(&t, dims, c, patch).unwrap(), g);
    }
}
