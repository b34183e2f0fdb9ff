//! Training objective on real model inputs.

use flowface::backbone::{Adapters, Model};
use flowface::codec;
use flowface::flow::{noise, recover, standard_normal_grid};
use flowface::harness::synth::SyntheticIdentity;
use flowface::identity::Provenance;
use flowface::objective::{cosine_id_loss, omega, sample_loss, total_loss, IdentityTargets, LossConfig, SampleInputs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(n_refs: usize) -> (Model, flowface::grid::Grid, Vec<flowface::grid::Grid>, flowface::grid::Grid) {
    let mut model = Model::new(Default::default()).unwrap();
    model.randomize_adapters(9, 0.1).unwrap();
    let id = SyntheticIdentity::new(404);
    let clean = id.render_slot(0);
    let refs = (1..=n_refs as u64).map(|s| id.render_slot(s)).collect();
    let degraded = flowface::degrade::degrade(&clean, 10, 3).unwrap();
    (model, clean, refs, degraded)
}

#[test]
fn no_references_means_no_identity_bracket() {
    let (model, clean, refs, degraded) = fixture(0);
    let prep = model.prepare(&degraded, &refs).unwrap();
    assert_eq!(prep.anchor.provenance, Provenance::DegradedFallback);
    assert!(IdentityTargets::for_sample(&prep, model.stub(), &clean).unwrap().is_none());
    let eps = standard_normal_grid(&mut ChaCha8Rng::seed_from_u64(1), 4, 8, 8);
    let cfg = LossConfig::default();
    let (_, nodes) = sample_loss(
        &model,
        &SampleInputs {
            clean: &clean,
            prepared: &prep,
            eps: &eps,
            sigma: 0.6,
        },
        &cfg,
    )
    .unwrap();
    let b = nodes.breakdown;
    assert!(!b.has_references);
    assert_eq!((b.l_ref_id, b.l_hard, b.lambda_h_star), (0.0, 0.0, 0.0));
    assert_eq!(b.total, cfg.alpha_fm * b.l_fm);
}

#[test]
fn references_add_the_weighted_bracket() {
    let (model, clean, refs, degraded) = fixture(2);
    let prep = model.prepare(&degraded, &refs).unwrap();
    let targets = IdentityTargets::for_sample(&prep, model.stub(), &clean).unwrap().unwrap();
    let z0 = codec::encode(&clean).unwrap();
    let eps = standard_normal_grid(&mut ChaCha8Rng::seed_from_u64(2), 4, 8, 8);
    let cfg = LossConfig::default();
    for sigma in [0.05, 0.5, 0.95] {
        let st = noise(&z0, &eps, sigma).unwrap();
        let u_hat = model.predict_prepared(&prep, &st.z_sigma, sigma, Adapters::ALL).unwrap();
        let b = total_loss(&u_hat, &st, Some(&targets), &model, &cfg).unwrap();
        assert!(b.has_references);
        assert_eq!(b.omega, omega(sigma, cfg.omega_min));
        assert!((cfg.omega_min * cfg.omega_min..=1.0).contains(&b.omega));
        assert!((0.0..=cfg.lambda_h).contains(&b.lambda_h_star));
        assert!((b.recompose(&cfg) - b.total).abs() < 1e-9);

        // identity terms are read off the decoded clean-latent estimate
        let decoded = codec::decode(&recover(&st.z_sigma, &u_hat, sigma).unwrap()).unwrap();
        let l_ref = cosine_id_loss(model.stub(), &decoded, &targets.e_ref).unwrap();
        assert!((l_ref - b.l_ref_id).abs() < 1e-9);
        let l_gt = cosine_id_loss(model.stub(), &decoded, &targets.e_gt).unwrap();
        assert!((l_gt - b.l_hard).abs() < 1e-9);
    }
}

#[test]
fn perfect_prediction_has_zero_flow_loss() {
    let (model, clean, refs, degraded) = fixture(1);
    let prep = model.prepare(&degraded, &refs).unwrap();
    let targets = IdentityTargets::for_sample(&prep, model.stub(), &clean).unwrap();
    let z0 = codec::encode(&clean).unwrap();
    let eps = standard_normal_grid(&mut ChaCha8Rng::seed_from_u64(3), 4, 8, 8);
    let st = noise(&z0, &eps, 0.4).unwrap();
    let b = total_loss(&st.u_star, &st, targets.as_ref(), &model, &LossConfig::default()).unwrap();
    assert!(b.l_fm < 1e-20);
    // exact recovery decodes to the clean image, so the hard term vanishes
    assert!(b.l_hard.abs() < 1e-9);
}
