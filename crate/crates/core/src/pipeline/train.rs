//! The three training stages.

use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_two_views, AugmentationPolicy, PolicyKind, RngState};
use crate::blackbox::PseudoLabelCache;
use crate::data::{Dataset, ImageTensor};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::losses::{batch_loss_and_grad, Target};
use crate::model::{build_model, save_checkpoint, Mode, ModelSpec, SegmentationModel};
use crate::optim::{Adam, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    Source,
    Stage1,
    Stage2NoAug,
    Stage2,
}

impl StageId {
    pub fn label(self) -> &'static str {
        match self {
            StageId::Source => "Source only",
            StageId::Stage1 => "Stage I",
            StageId::Stage2NoAug => "Stage II w/o aug",
            StageId::Stage2 => "Stage II w/ aug",
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            StageId::Source => "source",
            StageId::Stage1 => "stage1",
            StageId::Stage2NoAug => "stage2_noaug",
            StageId::Stage2 => "stage2",
        }
    }

    pub const ALL: [StageId; 4] = [StageId::Source, StageId::Stage1, StageId::Stage2NoAug, StageId::Stage2];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageId,
    /// Mean batch loss at every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean of the step losses per epoch.
    pub epoch_losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    /// Black-box queries attributable to this stage.
    pub query_count: u64,
    pub metrics: Option<MetricReport>,
}

impl StageReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Where a stage writes its checkpoints; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPlan {
    pub dir: Option<PathBuf>,
}

impl CheckpointPlan {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    fn paths(&self, stage: StageId) -> Option<(PathBuf, PathBuf)> {
        self.dir.as_ref().map(|d| {
            (
                d.join(format!("{}.ckpt", stage.file_stem())),
                d.join(format!("{}_best.ckpt", stage.file_stem())),
            )
        })
    }
}

/// Shared mini-batch loop. `make_batch` receives the sample indices of one
/// step plus the stage's RNG and returns the supervised examples.
fn fit(
    model: &mut SegmentationModel,
    opt: &OptimizerConfig,
    n: usize,
    stage: StageId,
    plan: &CheckpointPlan,
    mut make_batch: impl FnMut(&[usize], &mut ChaCha8Rng) -> Result<Vec<(ImageTensor, Target)>>,
) -> Result<StageReport> {
    opt.validate(stage.file_stem())?;
    if n == 0 {
        return Err(Error::Input(format!("{}: empty training set", stage.file_stem())));
    }
    let started = Instant::now();
    model.set_mode(Mode::Train);
    let mut adam = Adam::new(model.num_parameters(), opt.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut view_rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(opt.epochs);
    let paths = plan.paths(stage);
    let mut best = f64::INFINITY;

    for epoch in 0..opt.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            let batch = make_batch(chunk, &mut view_rng)?;
            let (loss, grads) = batch_loss_and_grad(model, &batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    stage: stage.file_stem().into(),
                    step: step_losses.len(),
                    loss,
                });
            }
            adam.update(model.parameters_mut(), &grads);
            step_losses.push(loss);
            epoch_sum += loss;
            steps += 1;
        }
        let mean = epoch_sum / steps as f64;
        epoch_losses.push(mean);
        info!("{} epoch {}/{}: loss {mean:.5}", stage.file_stem(), epoch + 1, opt.epochs);
        if let Some((_, best_path)) = &paths {
            if mean < best {
                best = mean;
                save_checkpoint(model, best_path)?;
            }
        }
    }
    model.set_mode(Mode::Eval);
    let (checkpoint, best_checkpoint) = match paths {
        Some((last, best_path)) => {
            save_checkpoint(model, &last)?;
            (Some(last), Some(best_path))
        }
        None => (None, None),
    };
    Ok(StageReport {
        stage,
        step_losses,
        epoch_losses,
        checkpoint,
        best_checkpoint,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        query_count: 0,
        metrics: None,
    })
}

fn check_classes(spec: &ModelSpec, dataset: &Dataset, what: &str) -> Result<()> {
    if spec.out_classes != dataset.classes() {
        return Err(Error::Config(format!(
            "{what} model predicts {} classes, dataset has {}",
            spec.out_classes,
            dataset.classes()
        )));
    }
    if let Some(c) = dataset.channels() {
        if c != spec.in_channels {
            return Err(Error::Config(format!(
                "{what} model expects {} input channels, dataset has {c}",
                spec.in_channels
            )));
        }
    }
    Ok(())
}

/// Stage 0: supervised cross-entropy on labeled source data.
pub fn train_source(
    source_train: &Dataset,
    spec: &ModelSpec,
    opt: &OptimizerConfig,
    plan: &CheckpointPlan,
) -> Result<(SegmentationModel, StageReport)> {
    if !source_train.is_labeled() {
        return Err(Error::Input("source training requires a fully labeled dataset".into()));
    }
    check_classes(spec, source_train, "source")?;
    let mut model = build_model(spec)?;
    let samples = source_train.samples();
    let report = fit(&mut model, opt, samples.len(), StageId::Source, plan, |idx, _| {
        Ok(idx
            .iter()
            .map(|i| {
                let s = &samples[*i];
                (s.image.clone(), Target::Hard(s.mask.clone().expect("checked labeled")))
            })
            .collect())
    })?;
    Ok((model, report))
}

/// Stage I: a fresh target model distilled from frozen soft pseudo-labels on
/// unaugmented target images. Issues no black-box queries itself.
pub fn train_stage1(
    cache: &PseudoLabelCache,
    target_train: &Dataset,
    target_spec: &ModelSpec,
    opt: &OptimizerConfig,
    plan: &CheckpointPlan,
) -> Result<(SegmentationModel, StageReport)> {
    cache.ensure_covers(target_train)?;
    check_classes(target_spec, target_train, "target")?;
    let mut model = build_model(target_spec)?;
    let samples = target_train.samples();
    let targets: Vec<&crate::data::SoftLabelMap> = samples
        .iter()
        .map(|s| cache.get(&s.id).expect("coverage checked"))
        .collect();
    if targets.iter().any(|t| t.classes() != target_spec.out_classes) {
        return Err(Error::Config("cached soft labels disagree with the target class count".into()));
    }
    let mut report = fit(&mut model, opt, samples.len(), StageId::Stage1, plan, |idx, _| {
        Ok(idx
            .iter()
            .map(|i| (samples[*i].image.clone(), Target::Soft(targets[*i].clone())))
            .collect())
    })?;
    report.query_count = cache.provenance().queries;
    Ok((model, report))
}

/// Options for Stage II that are not part of the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Options {
    pub weak: AugmentationPolicy,
    pub strong: AugmentationPolicy,
    /// `false` feeds the student the raw image (ablation without strong augmentation).
    pub use_strong_aug: bool,
}

/// Stage II: a fresh student distilled from the frozen Stage-I teacher.
///
/// Every step draws a weak and a strong view per image; the teacher labels
/// the weak view and the student is fit to that label on the strong view (or
/// the raw image when strong augmentation is off).
pub fn train_stage2(
    teacher: &SegmentationModel,
    target_train: &Dataset,
    student_spec: &ModelSpec,
    options: &Stage2Options,
    opt: &OptimizerConfig,
    plan: &CheckpointPlan,
) -> Result<(SegmentationModel, StageReport)> {
    if teacher.spec().out_classes != student_spec.out_classes {
        return Err(Error::Config(format!(
            "teacher predicts {} classes, student {}",
            teacher.spec().out_classes,
            student_spec.out_classes
        )));
    }
    if options.weak.kind() != PolicyKind::Weak || options.strong.kind() != PolicyKind::Strong {
        return Err(Error::Config("stage II needs a weak and a strong policy".into()));
    }
    options.weak.validate()?;
    options.strong.validate()?;
    check_classes(student_spec, target_train, "student")?;
    let stage = if options.use_strong_aug {
        StageId::Stage2
    } else {
        StageId::Stage2NoAug
    };
    let mut student = build_model(student_spec)?;
    let samples = target_train.samples();
    let report = fit(&mut student, opt, samples.len(), stage, plan, |idx, rng: &mut RngState| {
        let mut batch = Vec::with_capacity(idx.len());
        for i in idx {
            let image = &samples[*i].image;
            let (weak_view, strong_view) = sample_two_views(image, &options.weak, &options.strong, rng)?;
            let label = teacher.forward(&weak_view)?;
            let input = if options.use_strong_aug { strong_view } else { image.clone() };
            batch.push((input, Target::Soft(label)));
        }
        Ok(batch)
    })?;
    Ok((student, report))
}
