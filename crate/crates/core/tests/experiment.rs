use std::fs;
use std::path::Path;

use kdseg::model::{read_checkpoint_spec, Architecture};
use kdseg::pipeline::{run_experiment, DataConfig, ExperimentConfig, Manifest, StageId, MANIFEST, METRICS_MD, PSEUDO_LABEL_FILE};
use kdseg::report::{generate_report, REPORT_DIR};
use kdseg::Error;

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic_default(out);
    if let DataConfig::Synthetic { image_size, n_train, n_test, .. } = &mut cfg.data {
        *image_size = 16;
        *n_train = 4;
        *n_test = 2;
    }
    for spec in [&mut cfg.source_model, &mut cfg.target_model, &mut cfg.student_model] {
        spec.width_factor = 2;
        spec.depth = 2;
    }
    for o in [&mut cfg.optimizer.source, &mut cfg.optimizer.stage1, &mut cfg.optimizer.stage2] {
        o.epochs = 2;
        o.batch_size = 2;
        o.learning_rate = 1e-2;
    }
    cfg
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn source_only_config_gives_one_checkpoint_and_one_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.stages.stage1 = false;
    cfg.stages.stage2 = false;
    cfg.stages.stage2_no_aug = false;
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.reports.len(), 1);
    assert_eq!(files(&dir.path().join("reports")), ["source.json"]);
    assert_eq!(files(&dir.path().join("checkpoints")), ["source.ckpt", "source_best.ckpt"]);
    assert!(!dir.path().join(PSEUDO_LABEL_FILE).exists());
}

#[test]
fn full_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let outcome = run_experiment(&cfg).unwrap();
    let stages: Vec<StageId> = outcome.reports.iter().map(|r| r.stage).collect();
    assert_eq!(stages, StageId::ALL);
    let table = fs::read_to_string(dir.path().join(METRICS_MD)).unwrap();
    for stage in StageId::ALL {
        assert!(table.contains(stage.label()), "{table}");
    }
    let stage1 = &outcome.reports[1];
    assert_eq!(stage1.query_count, 4);
    assert!(outcome.reports[2..].iter().all(|r| r.query_count == 0));
    assert!(outcome.reports.iter().all(|r| r.step_losses.iter().all(|l| l.is_finite())));

    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest.config_sha256, cfg.hash());
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.stages, StageId::ALL);

    let summary = generate_report(dir.path()).unwrap();
    assert!(summary.warnings.is_empty(), "{:?}", summary.warnings);
    let report_files = files(&dir.path().join(REPORT_DIR));
    assert!(report_files.contains(&"dsc_bars.png".to_owned()));
    assert!(report_files.contains(&"loss_stage2.png".to_owned()));
    assert_eq!(report_files.iter().filter(|f| f.starts_with("overlay_")).count(), 2);
}

#[test]
fn resuming_from_a_source_checkpoint_skips_source_training() {
    let first = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(first.path());
    cfg.stages.stage1 = false;
    cfg.stages.stage2 = false;
    cfg.stages.stage2_no_aug = false;
    let source = run_experiment(&cfg).unwrap();
    let ckpt = source.reports[0].checkpoint.clone().unwrap();

    let second = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(second.path());
    cfg.stages.source = false;
    cfg.resume.source_checkpoint = Some(ckpt);
    let outcome = run_experiment(&cfg).unwrap();
    assert!(outcome.reports[0].epoch_losses.is_empty());
    assert_eq!(outcome.mean_dsc(StageId::Source), source.mean_dsc(StageId::Source));
    assert!(!second.path().join("checkpoints/source.ckpt").exists());
    assert!(second.path().join("checkpoints/stage2.ckpt").exists());
}

#[test]
fn heterogeneous_architectures_complete() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.target_model.architecture = Architecture::TinyEncdec;
    cfg.student_model.architecture = Architecture::TinyEncdec;
    run_experiment(&cfg).unwrap();
    let spec = read_checkpoint_spec(&dir.path().join("checkpoints/stage2.ckpt")).unwrap();
    assert_eq!(spec.architecture, Architecture::TinyEncdec);
    let spec = read_checkpoint_spec(&dir.path().join("checkpoints/source.ckpt")).unwrap();
    assert_eq!(spec.architecture, Architecture::SmallEncdec);
}

#[test]
fn invalid_config_fails_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = tiny_config(&out);
    cfg.optimizer.stage1.epochs = 0;
    cfg.student_model.out_classes = 5;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(!out.exists());
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&tiny_config(a.path())).unwrap();
    let rb = run_experiment(&tiny_config(b.path())).unwrap();
    assert_eq!(ra.table, rb.table);
    for name in files(&a.path().join("checkpoints")) {
        let ca = fs::read(a.path().join("checkpoints").join(&name)).unwrap();
        let cb = fs::read(b.path().join("checkpoints").join(&name)).unwrap();
        assert!(ca == cb, "{name} differs");
    }
    assert_eq!(
        fs::read(a.path().join(PSEUDO_LABEL_FILE)).unwrap(),
        fs::read(b.path().join(PSEUDO_LABEL_FILE)).unwrap()
    );
}
