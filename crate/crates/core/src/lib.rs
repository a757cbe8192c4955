//! Two-stage knowledge distillation for adapting segmentation models when the
//! source model is only reachable as a probability-map oracle.
//!
//! Stage 0 trains a source model with pixel-wise cross-entropy. The source
//! model is then sealed behind [`blackbox::BlackBoxPredictor`]. Stage I
//! distills a freshly initialized target model from cached soft labels with a
//! pixel-wise KL objective; Stage II distills a second fresh student from the
//! frozen Stage-I model, feeding the teacher a weakly augmented view and the
//! student a strongly augmented one.

pub mod augment;
pub mod blackbox;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod report;

pub use error::{Error, ErrorCategory, Result};
