mod common;

use common::*;
use kdseg::augment::AugmentationPolicy;
use kdseg::blackbox::{precompute_pseudo_labels, remote_predictor, serve_predictor, wrap_as_blackbox, BlackBoxPredictor, PseudoLabelCache};
use kdseg::eval::evaluate;
use kdseg::model::{build_model, Architecture};
use kdseg::pipeline::{train_stage1, train_stage2, CheckpointPlan, Stage2Options};

/// Stages I and II driven by a predictor with no model behind it: all
/// queries happen during precompute, none during training.
#[test]
fn adaptation_runs_against_a_parameter_free_stub() {
    let (_, tgt) = tiny_pair(6, 2);
    let train = tgt.train.without_labels();
    let predictor = BlackBoxPredictor::from_oracle(IntensityStub);
    let cache = precompute_pseudo_labels(&predictor, &train).unwrap();
    assert_eq!(predictor.query_count(), train.len() as u64);
    assert_eq!(cache.len(), train.len());

    let plan = CheckpointPlan::default();
    let (teacher, r1) = train_stage1(&cache, &train, &tiny_spec(Architecture::TinyEncdec, 1), &opt(2, 1e-2, 0), &plan).unwrap();
    assert_eq!(r1.query_count, train.len() as u64);
    assert_eq!(predictor.query_count(), train.len() as u64);

    let options = Stage2Options {
        weak: AugmentationPolicy::weak(),
        strong: AugmentationPolicy::strong(),
        use_strong_aug: true,
    };
    let (student, r2) = train_stage2(&teacher, &train, &tiny_spec(Architecture::TinyEncdec, 2), &options, &opt(2, 1e-2, 0), &plan).unwrap();
    assert_eq!(r2.query_count, 0);
    assert_eq!(predictor.query_count(), train.len() as u64);
    evaluate(&student, &tgt.test).unwrap();
}

#[test]
fn remote_and_local_predictors_give_identical_caches_and_stage1() {
    let (_, tgt) = tiny_pair(5, 2);
    let train = tgt.train.without_labels();
    let spec = tiny_spec(Architecture::SmallEncdec, 17);
    let local = wrap_as_blackbox(build_model(&spec).unwrap());
    let server = serve_predictor(wrap_as_blackbox(build_model(&spec).unwrap()), "127.0.0.1:0").unwrap();
    let remote = remote_predictor(server.local_addr()).unwrap();

    for s in train.samples() {
        let a = local.predict(&s.image).unwrap();
        let b = remote.predict(&s.image).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    let dir = tempfile::tempdir().unwrap();
    let local_cache = precompute_pseudo_labels(&local, &train).unwrap();
    let remote_cache = precompute_pseudo_labels(&remote, &train).unwrap();
    let (lp, rp) = (dir.path().join("local.bin"), dir.path().join("remote.bin"));
    local_cache.save(&lp).unwrap();
    remote_cache.save(&rp).unwrap();
    assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&rp).unwrap());

    let plan = CheckpointPlan::default();
    let target_spec = tiny_spec(Architecture::TinyEncdec, 3);
    let run = |cache: &PseudoLabelCache| {
        let (model, report) = train_stage1(cache, &train, &target_spec, &opt(2, 1e-2, 1), &plan).unwrap();
        (model.parameters().to_vec(), report.epoch_losses, evaluate(&model, &tgt.test).unwrap())
    };
    let from_local = run(&PseudoLabelCache::load(&lp).unwrap());
    let from_remote = run(&PseudoLabelCache::load(&rp).unwrap());
    assert_eq!(from_local, from_remote);
    server.shutdown();
}
