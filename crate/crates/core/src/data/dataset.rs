use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::tensor::{ImageTensor, LabelMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub mask: Option<LabelMask>,
}

/// An ordered, immutable collection of samples from one domain and split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    domain: Domain,
    split: Split,
    classes: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(domain: Domain, split: Split, classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        let mut channels = None;
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
            match channels {
                None => channels = Some(s.image.channels()),
                Some(c) if c != s.image.channels() => {
                    return Err(Error::Data(format!(
                        "sample {} has {} channels, expected {c}",
                        s.id,
                        s.image.channels()
                    )))
                }
                _ => {}
            }
            if let Some(m) = &s.mask {
                if m.height() != s.image.height() || m.width() != s.image.width() {
                    return Err(Error::Data(format!(
                        "sample {}: mask {}x{} does not match image {}x{}",
                        s.id,
                        m.height(),
                        m.width(),
                        s.image.height(),
                        s.image.width()
                    )));
                }
                if m.classes() != classes {
                    return Err(Error::Data(format!(
                        "sample {}: mask declares {} classes, dataset has {classes}",
                        s.id,
                        m.classes()
                    )));
                }
            }
        }
        if domain == Domain::Source && samples.iter().any(|s| s.mask.is_none()) {
            return Err(Error::Data("source datasets must be fully labeled".into()));
        }
        Ok(Self {
            domain,
            split,
            classes,
            samples,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn is_labeled(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.mask.is_some())
    }

    pub fn channels(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.channels())
    }

    /// Copy with all masks removed; what the adaptation side gets for target-train.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            domain: self.domain,
            split: self.split,
            classes: self.classes,
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    id: s.id.clone(),
                    image: s.image.clone(),
                    mask: None,
                })
                .collect(),
        }
    }

    /// First `n` samples, preserving order.
    pub fn truncated(&self, n: usize) -> Dataset {
        Dataset {
            domain: self.domain,
            split: self.split,
            classes: self.classes,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }

    pub fn ids_disjoint(&self, other: &Dataset) -> bool {
        let ids: HashSet<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        other.samples.iter().all(|s| !ids.contains(s.id.as_str()))
    }
}

/// Train/test pair for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    pub train: Dataset,
    pub test: Dataset,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, labeled: bool) -> Sample {
        Sample {
            id: id.into(),
            image: ImageTensor::filled(2, 2, 1, 0.5).unwrap(),
            mask: labeled.then(|| LabelMask::new(2, 2, 3, vec![0, 1, 2, 0]).unwrap()),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Dataset::new(Domain::Target, Split::Train, 3, vec![sample("a", true), sample("a", true)]);
        assert!(err.is_err());
    }

    #[test]
    fn source_requires_labels() {
        assert!(Dataset::new(Domain::Source, Split::Train, 3, vec![sample("a", false)]).is_err());
        assert!(Dataset::new(Domain::Target, Split::Train, 3, vec![sample("a", false)]).is_ok());
    }

    #[test]
    fn stripping_labels() {
        let d = Dataset::new(Domain::Target, Split::Train, 3, vec![sample("a", true), sample("b", true)]).unwrap();
        assert!(d.is_labeled());
        let u = d.without_labels();
        assert!(!u.is_labeled());
        assert_eq!(u.len(), 2);
    }

    #[test]
    fn mask_shape_mismatch_is_data_error() {
        let mut s = sample("a", true);
        s.mask = Some(LabelMask::new(1, 4, 3, vec![0; 4]).unwrap());
        assert!(matches!(
            Dataset::new(Domain::Target, Split::Train, 3, vec![s]),
            Err(Error::Data(_))
        ));
    }
}
