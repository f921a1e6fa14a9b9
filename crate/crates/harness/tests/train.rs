mod common;

use common::*;
use vpnext::Model;
use vpnext_harness::train::{train, train_model, RunManifest};
use vpnext_harness::HarnessError;

#[test]
fn zero_lr_freezes_parameters() {
    let mut cfg = tiny();
    cfg.train.base_lr = 0.0;
    cfg.train.weight_decay = 0.5;
    let corpus = tiny_corpus(&cfg);
    let mc = cfg.model_for(&cfg.variant).unwrap();
    let out = train(&mc, &corpus, &cfg.train, |_| {}).unwrap();
    let fresh = Model::<f32>::new(mc, cfg.train.seed).unwrap();
    for ((n, a), (_, b)) in out.model.params().iter().zip(fresh.params().iter()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
}

#[test]
fn tiny_clip_bounds_every_step() {
    let mut cfg = tiny();
    cfg.train.clip_norm = 1e-9;
    let corpus = tiny_corpus(&cfg);
    let out = train(&cfg.model_for(&cfg.variant).unwrap(), &corpus, &cfg.train, |_| {}).unwrap();
    for s in &out.log {
        assert!(s.grad_norm > 1e-9);
        assert!(s.clipped_norm <= 1e-9 + 1e-15, "step {}: {}", s.step, s.clipped_norm);
    }
}

#[test]
fn identical_seeds_identical_curves() {
    let cfg = tiny();
    let corpus = tiny_corpus(&cfg);
    let mc = cfg.model_for(&cfg.variant).unwrap();
    let a = train(&mc, &corpus, &cfg.train, |_| {}).unwrap();
    let b = train(&mc, &corpus, &cfg.train, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best_eval, b.best_eval);
    let ma = RunManifest::new(&cfg.variant, &corpus, &cfg.train, &a, "best.vpnx").unwrap();
    let mut mb = RunManifest::new(&cfg.variant, &corpus, &cfg.train, &b, "best.vpnx").unwrap();
    mb.wall_time_secs = ma.wall_time_secs;
    assert_eq!(ma, mb);
    assert_eq!(ma.code_hash.len(), 64);

    let mut other = cfg.train.clone();
    other.seed = 1;
    assert_ne!(train(&mc, &corpus, &other, |_| {}).unwrap().losses(), a.losses());
}

#[test]
fn loss_logged_every_step_with_poly_schedule() {
    let cfg = tiny();
    let corpus = tiny_corpus(&cfg);
    let mut seen = Vec::new();
    let out = train(&cfg.model_for(&cfg.variant).unwrap(), &corpus, &cfg.train, |s| seen.push(s.step)).unwrap();
    assert_eq!(seen, (0..cfg.train.steps).collect::<Vec<_>>());
    assert_eq!(out.log[0].lr, cfg.train.base_lr);
    assert!(out.log.windows(2).all(|w| w[1].lr < w[0].lr));
}

#[test]
fn best_checkpoint_has_highest_miou() {
    let mut cfg = tiny();
    cfg.train.steps = 6;
    cfg.train.eval_every = 2;
    let corpus = tiny_corpus(&cfg);
    let out = train(&cfg.model_for(&cfg.variant).unwrap(), &corpus, &cfg.train, |_| {}).unwrap();
    assert_eq!(out.evals.iter().map(|e| e.0).collect::<Vec<_>>(), [2, 4, 6]);
    let max = out.evals.iter().map(|e| e.1).fold(f64::MIN, f64::max);
    assert_eq!(out.best_eval.miou, max);
    assert!(out.evals.iter().any(|&(s, m)| s == out.best_step && m == max));
}

#[test]
fn non_finite_loss_reports_step_and_tensor() {
    let cfg = tiny();
    let corpus = tiny_corpus(&cfg);
    let mut model = Model::<f32>::new(cfg.model_for(&cfg.variant).unwrap(), 0).unwrap();
    model.params_mut().get_mut("head.w").unwrap().data_mut()[0] = f32::NAN;
    match train_model(model, &corpus, &cfg.train, |_| {}) {
        Err(HarnessError::NonFinite { step, tensor }) => {
            assert_eq!(step, 0);
            assert_eq!(tensor, "head.w");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }

    let mut cfg = tiny();
    cfg.model.vcr.aux_loss_weight = 1e39;
    let err = train(&cfg.model_for("vcr-2").unwrap(), &corpus, &cfg.train, |_| {}).unwrap_err();
    assert!(err.to_string().contains("step 0") && err.to_string().contains("aux"), "{err}");
}

#[test]
fn invalid_train_config_rejected() {
    let mut cfg = tiny();
    let corpus = tiny_corpus(&cfg);
    let mc = cfg.model_for(&cfg.variant).unwrap();
    cfg.train.batch_size = 0;
    assert_eq!(train(&mc, &corpus, &cfg.train, |_| {}).unwrap_err().exit_code(), 1);
    cfg.train.batch_size = 2;
    cfg.train.clip_norm = 0.0;
    assert!(train(&mc, &corpus, &cfg.train, |_| {}).is_err());
}
