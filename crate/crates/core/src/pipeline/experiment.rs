//! End-to-end runner: data, stages, evaluation, artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, ExperimentConfig};
use super::train::{
    train_source, train_stage1, train_stage2, CheckpointPlan, Stage2Options, StageId, StageReport,
};
use crate::augment::AugmentationPolicy;
use crate::blackbox::{precompute_pseudo_labels, wrap_as_blackbox};
use crate::error::{Error, Result};
use crate::data::Dataset;
use crate::eval::{evaluate, metric_table, MetricReport};
use crate::model::{load_checkpoint, SegmentationModel};

pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.bin";
pub const METRICS_MD: &str = "metrics.md";
pub const METRICS_JSON: &str = "metrics.json";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub run_seed: u64,
    pub effective_seeds: Vec<(String, u64)>,
    pub crate_version: String,
    pub checkpoint_version: u32,
    pub stages: Vec<StageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: StageId,
    pub label: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub reports: Vec<StageReport>,
    pub rows: Vec<MetricRow>,
    pub table: String,
}

impl ExperimentOutcome {
    pub fn mean_dsc(&self, stage: StageId) -> Option<f64> {
        self.rows.iter().find(|r| r.stage == stage).map(|r| r.report.mean_dsc())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, stages: Vec<StageId>) -> Self {
        let seed = |s: u64| config.seed(s);
        let mut effective_seeds = vec![
            ("source_model.init_seed".to_owned(), seed(config.source_model.init_seed)),
            ("target_model.init_seed".to_owned(), seed(config.target_model.init_seed)),
            ("student_model.init_seed".to_owned(), seed(config.student_model.init_seed)),
            ("optimizer.source.seed".to_owned(), seed(config.optimizer.source.seed)),
            ("optimizer.stage1.seed".to_owned(), seed(config.optimizer.stage1.seed)),
            ("optimizer.stage2.seed".to_owned(), seed(config.optimizer.stage2.seed)),
        ];
        if let DataConfig::Synthetic { shift, .. } = &config.data {
            effective_seeds.push(("data.shift.seed".to_owned(), seed(shift.seed)));
        }
        Self {
            config_sha256: config.hash(),
            config: config.clone(),
            run_seed: config.seeds.run,
            effective_seeds,
            crate_version: env!("CARGO_PKG_VERSION").to_owned(),
            checkpoint_version: crate::model::CHECKPOINT_VERSION,
            stages,
        }
    }
}

/// Writes `manifest.json` into the config's output directory.
pub fn write_manifest(config: &ExperimentConfig, stages: Vec<StageId>) -> Result<()> {
    create_dir(&config.output_dir)?;
    write_json(&config.output_dir.join(MANIFEST), &Manifest::new(config, stages))
}

/// Evaluates `model` on `test`, stores the metrics in `report` and writes
/// `reports/<stage>.json` under `output_dir`.
pub fn write_stage_report(
    output_dir: &Path,
    report: &mut StageReport,
    model: &SegmentationModel,
    test: &Dataset,
) -> Result<MetricReport> {
    let metrics = evaluate(model, test)?;
    info!("{}: target-test DSC {:.2}", report.stage.label(), metrics.mean_dsc());
    report.metrics = Some(metrics.clone());
    let dir = output_dir.join("reports");
    create_dir(&dir)?;
    write_json(&dir.join(format!("{}.json", report.stage.file_stem())), report)?;
    Ok(metrics)
}

/// Report for a model restored from a checkpoint instead of trained.
fn resumed_report(stage: StageId, checkpoint: &Path) -> StageReport {
    StageReport {
        stage,
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        checkpoint: Some(checkpoint.to_path_buf()),
        best_checkpoint: None,
        wall_clock_secs: 0.0,
        query_count: 0,
        metrics: None,
    }
}

fn load_resumed(path: &Path, expected: &crate::model::ModelSpec, what: &str) -> Result<SegmentationModel> {
    let model = load_checkpoint(path)?;
    if model.spec().out_classes != expected.out_classes || model.spec().in_channels != expected.in_channels {
        return Err(Error::Checkpoint(format!(
            "{what} checkpoint {} has {} classes / {} channels, config expects {} / {}",
            path.display(),
            model.spec().out_classes,
            model.spec().in_channels,
            expected.out_classes,
            expected.in_channels
        )));
    }
    Ok(model)
}

/// Runs every enabled stage in order (0, I, II w/o aug, II) and writes
/// `checkpoints/`, `reports/<stage>.json`, the pseudo-label cache, metric
/// tables and a manifest under `config.output_dir`.
///
/// The whole configuration is validated before any data is touched.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let out = config.output_dir.clone();
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let plan = CheckpointPlan::in_dir(&ckpt_dir);

    let source_spec = config.effective_model(&config.source_model);
    let target_spec = config.effective_model(&config.target_model);
    let student_spec = config.effective_model(&config.student_model);
    let opt_source = config.effective_optimizer(&config.optimizer.source);
    let opt_stage1 = config.effective_optimizer(&config.optimizer.stage1);
    let opt_stage2 = config.effective_optimizer(&config.optimizer.stage2);

    let (source, target) = config.load_data()?;
    let target_train = target.train.without_labels();
    let target_test = &target.test;
    if !target_test.is_labeled() {
        return Err(Error::Data("target test split must be labeled for evaluation".into()));
    }

    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut finish = |mut report: StageReport, model: &SegmentationModel| -> Result<()> {
        let metrics = write_stage_report(&out, &mut report, model, target_test)?;
        rows.push(MetricRow {
            stage: report.stage,
            label: report.stage.label().to_owned(),
            report: metrics,
        });
        reports.push(report);
        Ok(())
    };

    let source_model = if config.stages.source {
        let (model, report) = train_source(&source.train, &source_spec, &opt_source, &plan)?;
        finish(report, &model)?;
        Some(model)
    } else if let Some(path) = &config.resume.source_checkpoint {
        let model = load_resumed(path, &source_spec, "source")?;
        finish(resumed_report(StageId::Source, path), &model)?;
        Some(model)
    } else {
        None
    };

    let teacher = if config.stages.stage1 {
        let source_model = source_model.expect("validated: stage1 has a source");
        // From here on the source is reachable only through the predictor.
        let predictor = wrap_as_blackbox(source_model);
        let cache = precompute_pseudo_labels(&predictor, &target_train)?;
        drop(predictor);
        cache.save(&out.join(PSEUDO_LABEL_FILE))?;
        let (model, report) = train_stage1(&cache, &target_train, &target_spec, &opt_stage1, &plan)?;
        finish(report, &model)?;
        Some(model)
    } else if let Some(path) = &config.resume.stage1_checkpoint {
        drop(source_model);
        let model = load_resumed(path, &target_spec, "stage1")?;
        finish(resumed_report(StageId::Stage1, path), &model)?;
        Some(model)
    } else {
        None
    };

    let weak = AugmentationPolicy::Weak(config.augmentation.weak.clone());
    let strong = AugmentationPolicy::Strong(config.augmentation.strong.clone());
    for (enabled, use_strong_aug) in [(config.stages.stage2_no_aug, false), (config.stages.stage2, true)] {
        if !enabled {
            continue;
        }
        let teacher = teacher.as_ref().expect("validated: stage2 has a teacher");
        let options = Stage2Options {
            weak: weak.clone(),
            strong: strong.clone(),
            use_strong_aug,
        };
        let (model, report) = train_stage2(teacher, &target_train, &student_spec, &options, &opt_stage2, &plan)?;
        finish(report, &model)?;
    }

    let labelled: Vec<(String, &MetricReport)> = rows.iter().map(|r| (r.label.clone(), &r.report)).collect();
    let table = metric_table(&labelled);
    fs::write(out.join(METRICS_MD), &table).map_err(|e| Error::io(&out.join(METRICS_MD), e))?;
    write_json(&out.join(METRICS_JSON), &rows)?;

    write_manifest(config, reports.iter().map(|r| r.stage).collect())?;
    if reports.is_empty() {
        warn!("no stage produced a report");
    }
    Ok(ExperimentOutcome {
        output_dir: out,
        reports,
        rows,
        table,
    })
}
