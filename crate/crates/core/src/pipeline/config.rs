//! Declarative experiment configuration (TOML) with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentationPolicy, StrongPolicy, WeakPolicy};
use crate::data::synthetic::mix_seed;
use crate::data::{
    generate_synthetic_pair, load_dataset, resize, resize_mask, Dataset, Domain, DomainSplit, Sample, Split,
    SyntheticShiftSpec,
};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSpec};
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated in memory from `shift`.
    Synthetic {
        image_size: usize,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        shift: SyntheticShiftSpec,
    },
    /// `root/{source,target}/{train,test}/{images,masks}`; target-train masks are ignored.
    Directory {
        root: PathBuf,
        classes: usize,
        /// Square side length every image and mask is resized to.
        #[serde(default)]
        resize: Option<usize>,
    },
}

impl DataConfig {
    pub fn classes(&self) -> usize {
        match self {
            DataConfig::Synthetic { shift, .. } => shift.classes,
            DataConfig::Directory { classes, .. } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "OptimizerConfig::source_default")]
    pub source: OptimizerConfig,
    #[serde(default)]
    pub stage1: OptimizerConfig,
    #[serde(default)]
    pub stage2: OptimizerConfig,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            source: OptimizerConfig::source_default(),
            stage1: OptimizerConfig::default(),
            stage2: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSection {
    pub weak: WeakPolicy,
    pub strong: StrongPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    /// Run index. `0` uses every configured seed verbatim; any other value
    /// derives all seeds (data, init, optimizer) from it.
    pub run: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub source: bool,
    pub stage1: bool,
    pub stage2_no_aug: bool,
    pub stage2: bool,
}

impl Default for StageSection {
    fn default() -> Self {
        Self {
            source: true,
            stage1: true,
            stage2_no_aug: true,
            stage2: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResumeSection {
    pub source_checkpoint: Option<PathBuf>,
    pub stage1_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub source_model: ModelSpec,
    pub target_model: ModelSpec,
    pub student_model: ModelSpec,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub augmentation: AugmentationSection,
    #[serde(default)]
    pub seeds: SeedSection,
    #[serde(default)]
    pub stages: StageSection,
    #[serde(default)]
    pub resume: ResumeSection,
}

/// Parses `key.path=value`; the value is read as a TOML literal and falls back
/// to a bare string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override {raw:?} has an empty key segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((path, parsed))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override path {} crosses a non-table value", path.join(".")))),
        };
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text and applies overrides in order (last wins).
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut table, &path, value)?;
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut note = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        let classes = self.data.classes();
        match &self.data {
            DataConfig::Synthetic {
                image_size,
                n_train,
                n_test,
                shift,
            } => {
                note(shift.validate());
                if *image_size < 16 {
                    note(Err(Error::Config(format!("data.image_size {image_size} must be >= 16"))));
                }
                if *n_train == 0 || *n_test == 0 {
                    note(Err(Error::Config("data.n_train and data.n_test must be >= 1".into())));
                }
            }
            DataConfig::Directory { root, resize, .. } => {
                if !root.is_dir() {
                    note(Err(Error::Config(format!("data.root {} is not a directory", root.display()))));
                }
                if *resize == Some(0) {
                    note(Err(Error::Config("data.resize must be >= 1".into())));
                }
            }
        }
        for (name, spec) in [
            ("source_model", &self.source_model),
            ("target_model", &self.target_model),
            ("student_model", &self.student_model),
        ] {
            note(spec.validate().map_err(|e| Error::Config(format!("{name}: {e}"))));
            if spec.out_classes != classes {
                note(Err(Error::Config(format!(
                    "{name}.out_classes {} does not match the data's {classes} classes",
                    spec.out_classes
                ))));
            }
            if let Some(side) = self.image_side() {
                if side % spec.size_multiple() != 0 {
                    note(Err(Error::Config(format!(
                        "{name}: image size {side} is not a multiple of {}",
                        spec.size_multiple()
                    ))));
                }
            }
        }
        note(self.optimizer.source.validate("optimizer.source"));
        note(self.optimizer.stage1.validate("optimizer.stage1"));
        note(self.optimizer.stage2.validate("optimizer.stage2"));
        note(AugmentationPolicy::Weak(self.augmentation.weak.clone()).validate());
        note(AugmentationPolicy::Strong(self.augmentation.strong.clone()).validate());

        let st = &self.stages;
        if !(st.source || st.stage1 || st.stage2 || st.stage2_no_aug) {
            note(Err(Error::Config("no stage enabled".into())));
        }
        let has_source = st.source || self.resume.source_checkpoint.is_some();
        let has_stage1 = st.stage1 || self.resume.stage1_checkpoint.is_some();
        if st.stage1 && !has_source {
            note(Err(Error::Config(
                "stage1 needs the source stage or resume.source_checkpoint".into(),
            )));
        }
        if (st.stage2 || st.stage2_no_aug) && !has_stage1 {
            note(Err(Error::Config("stage2 needs stage1 or resume.stage1_checkpoint".into())));
        }
        for path in [&self.resume.source_checkpoint, &self.resume.stage1_checkpoint].into_iter().flatten() {
            if !path.is_file() {
                note(Err(Error::Config(format!("resume checkpoint {} not found", path.display()))));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn image_side(&self) -> Option<usize> {
        match &self.data {
            DataConfig::Synthetic { image_size, .. } => Some(*image_size),
            DataConfig::Directory { resize, .. } => *resize,
        }
    }

    /// Applies `seeds.run` to a configured seed.
    pub fn seed(&self, configured: u64) -> u64 {
        if self.seeds.run == 0 {
            configured
        } else {
            mix_seed(configured, self.seeds.run)
        }
    }

    pub fn effective_model(&self, spec: &ModelSpec) -> ModelSpec {
        ModelSpec {
            init_seed: self.seed(spec.init_seed),
            ..spec.clone()
        }
    }

    pub fn effective_optimizer(&self, opt: &OptimizerConfig) -> OptimizerConfig {
        OptimizerConfig {
            seed: self.seed(opt.seed),
            ..opt.clone()
        }
    }

    /// Loads or generates `(source, target)`. Target-train labels are kept
    /// here; the adaptation stages only ever receive an unlabeled copy.
    pub fn load_data(&self) -> Result<(DomainSplit, DomainSplit)> {
        match &self.data {
            DataConfig::Synthetic {
                image_size,
                n_train,
                n_test,
                shift,
            } => {
                let shift = SyntheticShiftSpec {
                    seed: self.seed(shift.seed),
                    ..shift.clone()
                };
                generate_synthetic_pair(&shift, *n_train, *n_test, *image_size)
            }
            DataConfig::Directory { root, classes, resize } => {
                let load = |domain: Domain, split: Split| -> Result<Dataset> {
                    let dir = root
                        .join(match domain {
                            Domain::Source => "source",
                            Domain::Target => "target",
                        })
                        .join(match split {
                            Split::Train => "train",
                            Split::Test => "test",
                        });
                    let ds = load_dataset(&dir, *classes, domain, split)?;
                    match resize {
                        Some(side) => resized(&ds, *side),
                        None => Ok(ds),
                    }
                };
                Ok((
                    DomainSplit {
                        train: load(Domain::Source, Split::Train)?,
                        test: load(Domain::Source, Split::Test)?,
                    },
                    DomainSplit {
                        train: load(Domain::Target, Split::Train)?,
                        test: load(Domain::Target, Split::Test)?,
                    },
                ))
            }
        }
    }

    /// A small, fast configuration on the synthetic benchmark.
    pub fn synthetic_default(output_dir: impl Into<PathBuf>) -> Self {
        let model = |arch, seed| ModelSpec::new(arch, 4, 3, 1, 3, seed);
        Self {
            output_dir: output_dir.into(),
            data: DataConfig::Synthetic {
                image_size: 64,
                n_train: 200,
                n_test: 50,
                shift: SyntheticShiftSpec::default(),
            },
            source_model: model(Architecture::SmallEncdec, 1),
            target_model: model(Architecture::SmallEncdec, 2),
            student_model: model(Architecture::SmallEncdec, 3),
            optimizer: OptimizerSection::default(),
            augmentation: AugmentationSection::default(),
            seeds: SeedSection::default(),
            stages: StageSection::default(),
            resume: ResumeSection::default(),
        }
    }
}

fn resized(ds: &Dataset, side: usize) -> Result<Dataset> {
    let samples = ds
        .samples()
        .iter()
        .map(|s| {
            Ok(Sample {
                id: s.id.clone(),
                image: resize(&s.image, side, side)?,
                mask: s.mask.as_ref().map(|m| resize_mask(m, side, side)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(ds.domain(), ds.split(), ds.classes(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> String {
        ExperimentConfig::synthetic_default("out").to_toml_string()
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::synthetic_default("out");
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn overrides_are_last_wins() {
        let cfg = ExperimentConfig::from_toml_str(
            &base(),
            &[
                "optimizer.stage1.epochs=3".into(),
                "optimizer.stage1.epochs=5".into(),
                "target_model.architecture=tiny-encdec".into(),
                "output_dir=elsewhere".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.optimizer.stage1.epochs, 5);
        assert_eq!(cfg.target_model.architecture, Architecture::TinyEncdec);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml_str(&base(), &["optimizer.stage1.epoch=3".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(ExperimentConfig::from_toml_str(&base(), &["novalue".into()]).is_err());
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = ExperimentConfig::from_toml_str(
            &base(),
            &[
                "optimizer.stage2.learning_rate=0.0".into(),
                "student_model.out_classes=4".into(),
                "source_model.depth=7".into(),
            ],
        )
        .unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("optimizer.stage2"), "{msg}");
        assert!(msg.contains("student_model.out_classes"), "{msg}");
        assert!(msg.contains("depth 7"), "{msg}");
    }

    #[test]
    fn later_stages_need_a_predecessor() {
        let cfg = ExperimentConfig::from_toml_str(&base(), &["stages.source=false".into()]).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::from_toml_str(
            &base(),
            &["stages.source=false".into(), "stages.stage1=false".into()],
        )
        .unwrap();
        assert!(cfg.validate().is_err());
        ExperimentConfig::synthetic_default("out").validate().unwrap();
    }

    #[test]
    fn run_zero_keeps_seeds() {
        let mut cfg = ExperimentConfig::synthetic_default("out");
        assert_eq!(cfg.seed(42), 42);
        cfg.seeds.run = 2;
        assert_ne!(cfg.seed(42), 42);
        assert_ne!(cfg.seed(42), cfg.seed(43));
    }
}
