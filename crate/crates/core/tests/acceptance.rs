//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use flowface::backbone::{Model, ModelConfig};
use flowface::checkpoint;
use flowface::degrade::{degrade, sample_strength, EVAL_SEED_BASE};
use flowface::flow::{self, noise, recover, standard_normal_grid, SamplerConfig};
use flowface::grid::Grid;
use flowface::harness::eval::{evaluate, restore, EvalMode};
use flowface::harness::synth::{identity_seed, make_dataset, SyntheticIdentity};
use flowface::harness::train::{batch_gradients, sample_breakdown, smoothed, train, ReferenceMix, TrainConfig};
use flowface::identity::{aggregate, split, Provenance, RawIdentityEmbedding, DEFAULT_TEMPERATURE};
use flowface::numerics::gradcheck::{parameter_gradient_error, sample_parameter_scalars};
use flowface::objective::{sample_loss, LossConfig, SampleInputs};
use flowface::parallel::Execution;
use flowface::structure::FULL_SCALE_MEMORY;
use flowface::tokens::{rope_rotate, PositionId, RopeConfig, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn reference_run_config() -> TrainConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference_run.conf");
    TrainConfig::load(path).expect("configs/reference_run.conf")
}

fn c1_flow_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let z0 = standard_normal_grid(&mut rng, 4, 8, 8);
        let eps = standard_normal_grid(&mut rng, 4, 8, 8);
        let sigma = rng.random::<f64>();
        let st = noise(&z0, &eps, sigma).map_err(|e| e.to_string())?;
        worst = worst.max(recover(&st.z_sigma, &st.u_star, sigma).unwrap().max_abs_diff(&z0));
    }
    let t = start.elapsed();
    ensure(worst < 1e-6, format!("max error {worst:e}"))?;
    ensure(t < Duration::from_secs(1), format!("took {t:?}"))?;
    Ok(format!("max error {worst:.1e} in {t:.2?}"))
}

fn c2_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst_op: f64 = 0.0;
    for op in common::op_cases() {
        let e = common::op_error(&op, 10);
        ensure(e < 1e-3, format!("{}: {e:e}", op.name))?;
        worst_op = worst_op.max(e);
    }
    let cfg = TrainConfig::default();
    let mut model = Model::new(cfg.model.clone()).unwrap();
    model.randomize_adapters(5, 0.1).unwrap();
    let batch = common::frozen_batch(&cfg);
    let (_, analytic) = batch_gradients(&model, &batch, &cfg.loss, Execution::Serial).unwrap();
    // every parameter tensor is probed, topped up to 0.25% of all scalars
    let scalars = sample_parameter_scalars(model.store(), 0.0025, 29);
    let loss_err = parameter_gradient_error(&mut model, Model::store_mut, &scalars, &analytic, |m| {
        let mut total = 0.0;
        for s in &batch {
            total += sample_breakdown(m, s, &cfg.loss)?.total;
        }
        Ok(total / batch.len() as f64)
    })
    .map_err(|e| e.to_string())?;
    let t = start.elapsed();
    ensure(loss_err < 1e-3, format!("total loss: {loss_err:e}"))?;
    ensure(t < Duration::from_secs(120), format!("took {t:?}"))?;
    Ok(format!(
        "worst op {worst_op:.1e}, total loss {loss_err:.1e} over {} scalars, {t:.1?}",
        scalars.len()
    ))
}

fn c3_rope() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = RopeConfig::full_scale();
    let n = cfg.head_dim();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut norm_err, mut rel_err): (f64, f64) = (0.0, 0.0);
    for axis in 0..4 {
        let at = |p: usize| {
            let mut a = [0; 4];
            a[axis] = p;
            PositionId::new(a[0], a[1], a[2], a[3])
        };
        for _ in 0..100 {
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (pq, pk, d) = (rng.random_range(0..64), rng.random_range(0..64), rng.random_range(1..64));
            ensure(rope_rotate(&q, PositionId::ORIGIN, &cfg).unwrap() == q, "zero position moved a vector")?;
            let rq = rope_rotate(&q, at(pq), &cfg).unwrap();
            norm_err = norm_err.max((dot(&rq, &rq).sqrt() - dot(&q, &q).sqrt()).abs());
            let s0 = dot(&rq, &rope_rotate(&k, at(pk), &cfg).unwrap());
            let s1 = dot(&rope_rotate(&q, at(pq + d), &cfg).unwrap(), &rope_rotate(&k, at(pk + d), &cfg).unwrap());
            rel_err = rel_err.max((s0 - s1).abs());
        }
    }
    ensure(norm_err < 1e-6, format!("norm error {norm_err:e}"))?;
    ensure(rel_err < 1e-5, format!("relative-position error {rel_err:e}"))?;
    Ok(format!("norm {norm_err:.1e}, relative position {rel_err:.1e}"))
}

fn c4_aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut raw = || RawIdentityEmbedding {
        z: {
            let s = rng.random_range(0.2..5.0);
            (0..32).map(|_| s * rng.random_range(-1.0..1.0)).collect()
        },
    };
    let (mut w_err, mut perm_err, mut scale_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let raws = [raw(), raw(), raw()];
        let splits: Vec<_> = raws.iter().map(|r| split(r).unwrap()).collect();
        let a = aggregate(&splits, 1.0).unwrap();
        let q: Vec<f64> = raws.iter().map(RawIdentityEmbedding::norm).collect();
        let total: f64 = q.iter().sum();
        for (w, qi) in a.weights.iter().zip(&q) {
            w_err = w_err.max((w - qi / total).abs());
        }
        let rev: Vec<_> = splits.iter().rev().cloned().collect();
        let b = aggregate(&rev, 1.0).unwrap();
        let cos: f64 = a.direction.iter().zip(&b.direction).map(|(x, y)| x * y).sum();
        perm_err = perm_err.max(1.0 - cos);
        let mut scaled = raws.clone();
        scaled[0].z.iter_mut().for_each(|v| *v *= 3.0);
        let c = aggregate(&scaled.iter().map(|r| split(r).unwrap()).collect::<Vec<_>>(), 1.0).unwrap();
        let denom = 3.0 * q[0] + q[1] + q[2];
        for (w, p) in c.weights.iter().zip([3.0 * q[0] / denom, q[1] / denom, q[2] / denom]) {
            scale_err = scale_err.max((w - p).abs());
        }
    }
    ensure(w_err < 1e-7, format!("weights {w_err:e}"))?;
    ensure(perm_err < 1e-6, format!("permutation {perm_err:e}"))?;
    ensure(scale_err < 1e-7, format!("c=3 reweighting {scale_err:e}"))?;
    Ok(format!("weights {w_err:.1e}, permutation {perm_err:.1e}, c=3 {scale_err:.1e}"))
}

fn random_inputs(seed: u64, n_refs: usize) -> (Grid, Grid, Vec<Grid>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal_grid(&mut rng, 4, 8, 8);
    let mut img = || Grid::from_fn(1, 16, 16, |_, _, _| rng.random::<f64>());
    let deg = img();
    let refs = (0..n_refs).map(|_| img()).collect();
    (z, deg, refs, rng.random())
}

fn c5_noop_at_init() -> Outcome {
    let m = Model::new(ModelConfig::toy()).unwrap();
    for seed in 0..10 {
        let (z, deg, refs, sigma) = random_inputs(seed, (seed % 4) as usize);
        let full = m.predict_flow(&z, &deg, &refs, sigma).unwrap();
        ensure(full == m.predict_bare(&z, &deg, &refs, sigma).unwrap(), format!("input {seed} differs"))?;
    }
    Ok("10 inputs bitwise equal".into())
}

fn c6_empty_references() -> Outcome {
    let m = Model::new(ModelConfig::toy()).unwrap();
    let cfg = LossConfig::default();
    let id = SyntheticIdentity::new(66);
    let clean = id.render_slot(0);
    for strength in [0, 8, 16] {
        let degraded = degrade(&clean, strength, 5).unwrap();
        let prep = m.prepare(&degraded, &[]).unwrap();
        ensure(prep.layout.reference_count() == 0, "reference segment present")?;
        ensure(
            prep.layout.segments.iter().all(|s| !matches!(s, Segment::Reference(_))),
            "reference tokens present",
        )?;
        ensure(prep.anchor.provenance == Provenance::DegradedFallback, "anchor is not the fallback")?;
        let eps = standard_normal_grid(&mut ChaCha8Rng::seed_from_u64(strength as u64), 4, 8, 8);
        let (_, nodes) = sample_loss(
            &m,
            &SampleInputs {
                clean: &clean,
                prepared: &prep,
                eps: &eps,
                sigma: 0.5,
            },
            &cfg,
        )
        .unwrap();
        let b = nodes.breakdown;
        ensure(b.total - cfg.alpha_fm * b.l_fm == 0.0, format!("identity bracket {}", b.total - cfg.alpha_fm * b.l_fm))?;
    }
    Ok("no reference segment, fallback anchor, bracket exactly 0".into())
}

fn c7_golden_constants() -> Outcome {
    let l = LossConfig::default();
    let t = TrainConfig::default();
    let s = SamplerConfig::default();
    let got = [
        l.alpha_fm,
        l.lambda_id,
        l.lambda_h,
        l.omega_min,
        DEFAULT_TEMPERATURE,
        ModelConfig::toy().temperature,
        FULL_SCALE_MEMORY as f64,
        s.steps as f64,
        s.guidance_scale,
        s.seed as f64,
        flow::DEFAULT_STEPS as f64,
        flow::DEFAULT_GUIDANCE,
        flow::DEFAULT_SEED as f64,
    ];
    let want = [0.75, 0.30, 0.25, 0.25, 1.0, 1.0, 256.0, 12.0, 4.0, 42.0, 12.0, 4.0, 42.0];
    ensure(got == want, format!("{got:?}"))?;
    ensure(ReferenceMix::default().probs == [0.3, 0.3, 0.2, 0.2], "reference mix")?;
    ensure(t.reference_mix == ReferenceMix::default(), "training reference mix")?;
    ensure(t.strength_buckets.probs == [0.5, 0.3, 0.2], "strength buckets")?;
    ensure(t.strength_buckets.ranges == [(0, 3), (4, 8), (9, 16)], "strength ranges")?;
    let shipped = TrainConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.conf"))
        .map_err(|e| e.to_string())?;
    ensure(shipped == t, "configs/default.conf differs from the built-in defaults")?;
    Ok("defaults and configs/default.conf match".into())
}

fn c8_training_sanity() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    ensure(cfg.steps == 200 && cfg.n_identities == 32, "default run is not 200 steps on 32 identities")?;
    let out = train(&cfg, Execution::Parallel).map_err(|e| e.to_string())?;
    let fm: Vec<f64> = out.log.iter().map(|l| l.l_fm).collect();
    let sm = smoothed(&fm, 20);
    let (first, last) = (sm[19], sm[sm.len() - 1]);
    let t = start.elapsed();
    ensure(last < 0.5 * first, format!("smoothed flow loss {first:.4} -> {last:.4}"))?;
    ensure(t < Duration::from_secs(600), format!("took {t:?}"))?;
    Ok(format!("smoothed flow loss {first:.4} -> {last:.4} (ratio {:.3}), {t:.1?}", last / first))
}

fn c9_directional() -> Outcome {
    let start = Instant::now();
    let cfg = reference_run_config();
    let model = train(&cfg, Execution::Parallel).map_err(|e| e.to_string())?.model;
    let corpus = make_dataset(100, 3, 999, Some(16)).unwrap();
    let sampler = SamplerConfig::default();
    let with = evaluate(&model, &corpus, EvalMode::WithRef, &sampler, Execution::Parallel).map_err(|e| e.to_string())?;
    let without = evaluate(&model, &corpus, EvalMode::NoRef, &sampler, Execution::Parallel).map_err(|e| e.to_string())?;
    ensure(with.rows.len() == 100 && without.rows.len() == 100, "expected 100 scored samples per mode")?;
    ensure(without.references_fed == 0, "no-ref mode fed references")?;
    let margin = with.ref_cosine_mean - without.ref_cosine_mean;
    ensure(
        margin > 0.0,
        format!("with-ref {:.4} vs no-ref {:.4}", with.ref_cosine_mean, without.ref_cosine_mean),
    )?;
    Ok(format!(
        "ref_cosine with-ref {:.4} vs no-ref {:.4} (margin {margin:.4}), {:.1?}",
        with.ref_cosine_mean,
        without.ref_cosine_mean,
        start.elapsed()
    ))
}

fn c10_determinism() -> Outcome {
    let cfg = TrainConfig {
        steps: 4,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let a = train(&cfg, Execution::Parallel).unwrap();
    let b = train(&cfg, Execution::Parallel).unwrap();
    ensure(a.log == b.log, "loss curves differ")?;
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    checkpoint::write(&a.model, &mut ca).unwrap();
    checkpoint::write(&b.model, &mut cb).unwrap();
    ensure(ca == cb, "checkpoints differ")?;

    let corpus = make_dataset(4, 2, 10, None).unwrap();
    let item = &corpus.items[0];
    let sampler = SamplerConfig::default();
    ensure(
        restore(&a.model, &item.degraded, &item.references, &sampler).unwrap()
            == restore(&b.model, &item.degraded, &item.references, &sampler).unwrap(),
        "restorations differ",
    )?;
    let quick = SamplerConfig {
        steps: 4,
        ..sampler
    };
    ensure(
        evaluate(&a.model, &corpus, EvalMode::WithRef, &quick, Execution::Parallel).unwrap()
            == evaluate(&a.model, &corpus, EvalMode::WithRef, &quick, Execution::Parallel).unwrap(),
        "eval reports differ",
    )?;
    for (i, it) in corpus.items.iter().enumerate() {
        let seed = EVAL_SEED_BASE + i as u64;
        ensure(degrade(&it.target, 12, seed).unwrap() == degrade(&it.target, 12, seed).unwrap(), "degrade differs")?;
    }
    Ok("train, restore, eval and degrade repeat bitwise".into())
}

fn c11_checkpoint() -> Outcome {
    let mut m = Model::new(ModelConfig::toy()).unwrap();
    m.randomize_adapters(11, 0.1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&m, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    for seed in 0..10 {
        let (z, deg, refs, sigma) = random_inputs(1000 + seed, (seed % 4) as usize);
        ensure(
            m.predict_flow(&z, &deg, &refs, sigma).unwrap() == back.predict_flow(&z, &deg, &refs, sigma).unwrap(),
            format!("input {seed} differs"),
        )?;
    }
    Ok("10 forwards bitwise equal after save/load".into())
}

fn c12_degradation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut counts = [0usize; 3];
    for _ in 0..100_000 {
        counts[match sample_strength(&mut rng) {
            0..=3 => 0,
            4..=8 => 1,
            _ => 2,
        }] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / 1e5).collect();
    for (f, p) in freqs.iter().zip([0.5, 0.3, 0.2]) {
        ensure((f - p).abs() < 0.01, format!("bucket frequencies {freqs:?}"))?;
    }
    for i in 0..20 {
        let img = SyntheticIdentity::new(identity_seed(12, i)).render_slot(0);
        ensure(degrade(&img, 0, EVAL_SEED_BASE + i as u64).unwrap() == img, "strength 0 changed the image")?;
    }
    let a = make_dataset(20, 1, 12, None).unwrap();
    let b = make_dataset(20, 1, 12, None).unwrap();
    for (x, y) in a.items.iter().zip(&b.items) {
        ensure(x.degrade_seed == EVAL_SEED_BASE + x.index as u64, "seed is not 42+i")?;
        ensure(x.degraded == y.degraded, "seed 42+i output differs")?;
        ensure(x.degraded == flowface::harness::image_io::quantize_8bit(&degrade(&x.target, x.strength, x.degrade_seed).unwrap()), "item not reproducible from its seed")?;
    }
    Ok(format!("buckets {:.4}/{:.4}/{:.4}", freqs[0], freqs[1], freqs[2]))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("flow algebra", c1_flow_algebra),
        ("gradient suite", c2_gradients),
        ("rope", c3_rope),
        ("identity aggregation", c4_aggregation),
        ("no-op at init", c5_noop_at_init),
        ("empty-reference rule", c6_empty_references),
        ("golden constants", c7_golden_constants),
        ("training sanity", c8_training_sanity),
        ("with-ref beats no-ref", c9_directional),
        ("determinism", c10_determinism),
        ("checkpoint round-trip", c11_checkpoint),
        ("degradation statistics", c12_degradation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("{:>2} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || (i + 1).to_string() == *f) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS {label}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {label}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
