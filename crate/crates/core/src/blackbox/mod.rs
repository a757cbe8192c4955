//! The only door between the adaptation side and the source model.
//!
//! A [`BlackBoxPredictor`] answers one question, "what are the class
//! probabilities for this image?", and offers nothing else: no parameters,
//! no logits, no gradients. Stage I consumes its answers through a
//! [`PseudoLabelCache`]; Stage II never touches it.
//!
//! ```compile_fail
//! use kdseg::blackbox::wrap_as_blackbox;
//! use kdseg::model::{build_model, Architecture, ModelSpec};
//! let model = build_model(&ModelSpec::new(Architecture::TinyEncdec, 2, 2, 1, 3, 0)).unwrap();
//! let predictor = wrap_as_blackbox(model);
//! let _ = predictor.parameters(); // no such method
//! ```
//!
//! ```compile_fail
//! use kdseg::blackbox::wrap_as_blackbox;
//! use kdseg::model::{build_model, Architecture, ModelSpec};
//! let model = build_model(&ModelSpec::new(Architecture::TinyEncdec, 2, 2, 1, 3, 0)).unwrap();
//! let predictor = wrap_as_blackbox(model);
//! let _inner = predictor.oracle; // private field
//! ```

mod cache;
mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cache::{precompute_pseudo_labels, CacheProvenance, PseudoLabelCache};
pub use wire::{remote_predictor, serve_predictor, PredictorServer, RetryPolicy};

use crate::data::{ImageTensor, SoftLabelMap};
use crate::error::Result;
use crate::eval::Segmenter;
use crate::model::{Mode, SegmentationModel};

/// Public, parameter-free description of a predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub classes: usize,
    pub channels: usize,
    /// Expected input size, if the predictor needs a fixed one.
    pub input_size: Option<(usize, usize)>,
}

/// Backend of a [`BlackBoxPredictor`]. Implementations must be stateless:
/// the same image always yields the same map.
pub trait ProbabilityOracle: Send + Sync {
    fn query(&self, image: &ImageTensor) -> Result<SoftLabelMap>;
    fn info(&self) -> OracleInfo;
    fn describe(&self) -> String;
}

/// Opaque image-to-probabilities handle with a query counter.
#[derive(Clone)]
pub struct BlackBoxPredictor {
    oracle: Arc<dyn ProbabilityOracle>,
    queries: Arc<AtomicU64>,
}

impl std::fmt::Debug for BlackBoxPredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxPredictor")
            .field("oracle", &self.oracle.describe())
            .field("queries", &self.query_count())
            .finish()
    }
}

impl BlackBoxPredictor {
    pub fn from_oracle(oracle: impl ProbabilityOracle + 'static) -> Self {
        Self {
            oracle: Arc::new(oracle),
            queries: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<SoftLabelMap> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.oracle.query(image)
    }

    pub fn info(&self) -> OracleInfo {
        self.oracle.info()
    }

    pub fn describe(&self) -> String {
        self.oracle.describe()
    }

    /// Queries issued through this handle and its clones.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

impl Segmenter for BlackBoxPredictor {
    fn predict(&self, image: &ImageTensor) -> Result<SoftLabelMap> {
        BlackBoxPredictor::predict(self, image)
    }
}

struct SealedModel {
    model: SegmentationModel,
    input_size: Option<(usize, usize)>,
}

impl ProbabilityOracle for SealedModel {
    fn query(&self, image: &ImageTensor) -> Result<SoftLabelMap> {
        self.model.forward(image)
    }

    fn info(&self) -> OracleInfo {
        OracleInfo {
            classes: self.model.spec().out_classes,
            channels: self.model.spec().in_channels,
            input_size: self.input_size,
        }
    }

    fn describe(&self) -> String {
        format!("local:{}", self.model.spec().architecture.name())
    }
}

/// Seals a trained model. The model is moved in and switched to eval mode;
/// nothing reachable from the returned handle exposes it again.
pub fn wrap_as_blackbox(model: SegmentationModel) -> BlackBoxPredictor {
    wrap_as_blackbox_sized(model, None)
}

/// Like [`wrap_as_blackbox`], advertising a fixed expected input size.
pub fn wrap_as_blackbox_sized(mut model: SegmentationModel, input_size: Option<(usize, usize)>) -> BlackBoxPredictor {
    model.set_mode(Mode::Eval);
    BlackBoxPredictor::from_oracle(SealedModel { model, input_size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Architecture, ModelSpec};

    #[test]
    fn wrapper_is_transparent_and_stateless() {
        let model = build_model(&ModelSpec::new(Architecture::TinyEncdec, 2, 2, 1, 3, 4)).unwrap();
        let img = ImageTensor::new(8, 8, 1, (0..64).map(|i| i as f64 / 63.0).collect()).unwrap();
        let direct = model.forward(&img).unwrap();
        let p = wrap_as_blackbox(model);
        let a = p.predict(&img).unwrap();
        let b = p.predict(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, direct);
        assert_eq!(p.query_count(), 2);
        assert_eq!(p.info().classes, 3);
    }
}
